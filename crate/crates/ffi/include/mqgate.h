#ifndef MQGATE_H
#define MQGATE_H

/* Generated by cbindgen; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MqStatus {
  MQ_STATUS_OK = 0,
  MQ_STATUS_NULL_ARGUMENT = 1,
  MQ_STATUS_INVALID_UTF8 = 2,
  MQ_STATUS_INVALID_INPUT = 3,
  MQ_STATUS_UNKNOWN_MODEL = 4,
  MQ_STATUS_OVERFLOW = 5,
  MQ_STATUS_PANIC = 6,
} MqStatus;

typedef enum MqFormat {
  MQ_FORMAT_JSON = 0,
  MQ_FORMAT_YAML = 1,
} MqFormat;

/**
 * Opaque pricing table.
 */
typedef struct MqPricing MqPricing;

typedef struct MqParams {
  size_t max_input_tokens;
  size_t max_output_tokens;
  double temperature;
} MqParams;

typedef struct MqPrf {
  double precision;
  double recall;
  double f1;
} MqPrf;

typedef struct MqRougeScore {
  struct MqPrf rouge1;
  struct MqPrf rouge2;
  struct MqPrf rouge_l;
} MqRougeScore;

typedef struct MqTTest {
  double t;
  size_t df;
  double p;
  double mean_delta;
  bool significant;
} MqTTest;

typedef struct MqCost {
  /**
   * Amounts in 1e-12 USD.
   */
  uint64_t input_pico_usd;
  uint64_t output_pico_usd;
} MqCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *mq_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void mq_string_free(char *s);

/**
 * Token estimate under the words-to-tokens ratio.
 *
 * # Safety
 * `text` must be a nul-terminated string; `out` must be writable.
 */
enum MqStatus mq_estimate_tokens(const char *text, size_t *out);

/**
 * Hex fingerprint of a normalized context.
 *
 * # Safety
 * `context` must be a nul-terminated string; `out` must be writable.
 */
enum MqStatus mq_fingerprint(const char *context, char **out);

/**
 * Parses `raw` against `queries_json` (a JSON array of strings) and writes
 * the report as JSON.
 *
 * # Safety
 * String arguments must be nul-terminated; `out` must be writable.
 */
enum MqStatus mq_parse(const char *raw, const char *queries_json, enum MqFormat format, char **out);

/**
 * Renders a job record (JSON) into prompt text. `template` may be null for
 * the default template of the job's format; `params` may be null for
 * default decoding parameters. `estimated_tokens` may be null.
 *
 * # Safety
 * String arguments must be nul-terminated or null where allowed; `out`
 * must be writable.
 */
enum MqStatus mq_render(const char *job_json,
                        const char *template_,
                        const struct MqParams *params,
                        char **out,
                        size_t *estimated_tokens);

/**
 * ROUGE-1/2/L of `candidate` against `reference`.
 *
 * # Safety
 * String arguments must be nul-terminated; `out` must be writable.
 */
enum MqStatus mq_rouge(const char *candidate,
                       const char *reference,
                       bool stem,
                       struct MqRougeScore *out);

/**
 * Paired two-sided t-test over `n` samples.
 *
 * # Safety
 * `a` and `b` must point to `n` readable doubles; `out` must be writable.
 */
enum MqStatus mq_paired_ttest(const double *a,
                              const double *b,
                              size_t n,
                              double alpha,
                              struct MqTTest *out);

/**
 * The bundled pricing table.
 *
 * # Safety
 * `out` must be writable.
 */
enum MqStatus mq_pricing_builtin(struct MqPricing **out);

/**
 * # Safety
 * `toml` must be nul-terminated; `out` must be writable.
 */
enum MqStatus mq_pricing_from_toml(const char *toml, struct MqPricing **out);

/**
 * # Safety
 * `pricing` must be a live handle; `model` nul-terminated; `out` writable.
 */
enum MqStatus mq_pricing_cost(const struct MqPricing *pricing,
                              const char *model,
                              uint64_t input_tokens,
                              uint64_t output_tokens,
                              struct MqCost *out);

/**
 * # Safety
 * `pricing` must be null or a handle from this library, not yet freed.
 */
void mq_pricing_free(struct MqPricing *pricing);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MQGATE_H */
