//! C ABI over the mqgate library.
//!
//! Every function returns an [`MqStatus`]; on failure a message is kept in
//! thread-local storage and can be read with [`mq_last_error`]. Strings
//! returned through out-pointers are owned by the caller and must be released
//! with [`mq_string_free`]. Pricing tables are opaque handles released with
//! [`mq_pricing_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mqgate::cost::{cost_of, CostError, PricingTable};
use mqgate::dataset::JobRecord;
use mqgate::metrics::{paired_ttest_at, rouge_with, Prf, RougeConfig};
use mqgate::model::{fingerprint, OutputFormat, Query};
use mqgate::parse::parse;
use mqgate::prompt::{estimate_tokens, render, DecodingParams, PromptTemplate};
use mqgate::MultiQueryJob;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MqStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    UnknownModel = 4,
    Overflow = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MqFormat {
    Json = 0,
    Yaml = 1,
}

impl From<MqFormat> for OutputFormat {
    fn from(f: MqFormat) -> Self {
        match f {
            MqFormat::Json => OutputFormat::Json,
            MqFormat::Yaml => OutputFormat::Yaml,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MqPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Prf> for MqPrf {
    fn from(p: Prf) -> Self {
        MqPrf { precision: p.precision, recall: p.recall, f1: p.f1 }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MqRougeScore {
    pub rouge1: MqPrf,
    pub rouge2: MqPrf,
    pub rouge_l: MqPrf,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MqParams {
    pub max_input_tokens: usize,
    pub max_output_tokens: usize,
    pub temperature: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MqCost {
    /// Amounts in 1e-12 USD.
    pub input_pico_usd: u64,
    pub output_pico_usd: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MqTTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub mean_delta: f64,
    pub significant: bool,
}

/// Opaque pricing table.
pub struct MqPricing {
    table: PricingTable,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MqStatus, String);

impl Failure {
    fn invalid(msg: impl ToString) -> Self {
        Failure(MqStatus::InvalidInput, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MqStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err(Failure(MqStatus::Panic, "internal panic".into())));
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = match &outcome {
            Ok(()) => None,
            Err(Failure(_, msg)) => Some(CString::new(msg.replace('\0', " ")).expect("nul bytes removed")),
        }
    });
    match outcome {
        Ok(()) => MqStatus::Ok,
        Err(Failure(status, _)) => status,
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MqStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MqStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

fn put<T>(p: *mut T, value: T) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure(MqStatus::NullArgument, "`out` is null".into()));
    }
    // SAFETY: non-null checked; caller guarantees the pointer is writable.
    unsafe { p.write(value) };
    Ok(())
}

fn give_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    put(out, CString::new(s).map_err(|_| Failure::invalid("result contains a nul byte"))?.into_raw())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn mq_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Token estimate under the words-to-tokens ratio.
///
/// # Safety
/// `text` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_estimate_tokens(text: *const c_char, out: *mut usize) -> MqStatus {
    guard(|| {
        let text = read_str(text, "text")?;
        put(out, estimate_tokens(text))?;
        Ok(())
    })
}

/// Hex fingerprint of a normalized context.
///
/// # Safety
/// `context` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_fingerprint(context: *const c_char, out: *mut *mut c_char) -> MqStatus {
    guard(|| {
        let context = read_str(context, "context")?;
        give_string(fingerprint(context.as_bytes()).to_hex(), out)
    })
}

/// Parses `raw` against `queries_json` (a JSON array of strings) and writes
/// the report as JSON.
///
/// # Safety
/// String arguments must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_parse(
    raw: *const c_char,
    queries_json: *const c_char,
    format: MqFormat,
    out: *mut *mut c_char,
) -> MqStatus {
    guard(|| {
        let raw = read_str(raw, "raw")?;
        let texts: Vec<String> = serde_json::from_str(read_str(queries_json, "queries_json")?).map_err(Failure::invalid)?;
        let queries = Query::list(texts).map_err(Failure::invalid)?;
        let report = parse(raw, &queries, format.into());
        give_string(serde_json::to_string(&report).map_err(Failure::invalid)?, out)
    })
}

/// Renders a job record (JSON) into prompt text. `template` may be null for
/// the default template of the job's format; `params` may be null for
/// default decoding parameters. `estimated_tokens` may be null.
///
/// # Safety
/// String arguments must be nul-terminated or null where allowed; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_render(
    job_json: *const c_char,
    template: *const c_char,
    params: *const MqParams,
    out: *mut *mut c_char,
    estimated_tokens: *mut usize,
) -> MqStatus {
    guard(|| {
        let record: JobRecord = serde_json::from_str(read_str(job_json, "job_json")?).map_err(Failure::invalid)?;
        let job = MultiQueryJob::try_from(record).map_err(Failure::invalid)?;
        let template = if template.is_null() {
            PromptTemplate::for_format(job.output_format())
        } else {
            PromptTemplate::resolve(read_str(template, "template")?).map_err(Failure::invalid)?
        };
        let params = match params.as_ref() {
            None => DecodingParams::default(),
            Some(p) => DecodingParams {
                max_input_tokens: p.max_input_tokens,
                max_output_tokens: p.max_output_tokens,
                temperature: p.temperature,
            },
        };
        let rendered = render(&job, &template, &params).map_err(Failure::invalid)?;
        if let Some(n) = estimated_tokens.as_mut() {
            *n = rendered.estimated_input_tokens;
        }
        give_string(rendered.text, out)
    })
}

/// ROUGE-1/2/L of `candidate` against `reference`.
///
/// # Safety
/// String arguments must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_rouge(
    candidate: *const c_char,
    reference: *const c_char,
    stem: bool,
    out: *mut MqRougeScore,
) -> MqStatus {
    guard(|| {
        let s = rouge_with(read_str(candidate, "candidate")?, read_str(reference, "reference")?, &RougeConfig { stem });
        put(out, MqRougeScore { rouge1: s.r1.into(), rouge2: s.r2.into(), rouge_l: s.rl.into() })?;
        Ok(())
    })
}

/// Paired two-sided t-test over `n` samples.
///
/// # Safety
/// `a` and `b` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_paired_ttest(a: *const f64, b: *const f64, n: usize, alpha: f64, out: *mut MqTTest) -> MqStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(Failure(MqStatus::NullArgument, "sample pointer is null".into()));
        }
        let (a, b) = (std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n));
        let r = paired_ttest_at(a, b, alpha).map_err(Failure::invalid)?;
        put(out, MqTTest { t: r.t, df: r.df, p: r.p, mean_delta: r.mean_delta, significant: r.significant })?;
        Ok(())
    })
}

fn give_pricing(table: PricingTable, out: *mut *mut MqPricing) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(MqStatus::NullArgument, "`out` is null".into()));
    }
    put(out, Box::into_raw(Box::new(MqPricing { table })))
}

/// The bundled pricing table.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_pricing_builtin(out: *mut *mut MqPricing) -> MqStatus {
    guard(|| give_pricing(PricingTable::builtin(), out))
}

/// # Safety
/// `toml` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_pricing_from_toml(toml: *const c_char, out: *mut *mut MqPricing) -> MqStatus {
    guard(|| give_pricing(PricingTable::from_toml(read_str(toml, "toml")?).map_err(Failure::invalid)?, out))
}

/// # Safety
/// `pricing` must be a live handle; `model` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mq_pricing_cost(
    pricing: *const MqPricing,
    model: *const c_char,
    input_tokens: u64,
    output_tokens: u64,
    out: *mut MqCost,
) -> MqStatus {
    guard(|| {
        let pricing = pricing.as_ref().ok_or_else(|| Failure(MqStatus::NullArgument, "`pricing` is null".into()))?;
        let model = read_str(model, "model")?;
        let cost = cost_of(input_tokens, output_tokens, model, &pricing.table).map_err(|e| match e {
            CostError::UnknownModel(_) => Failure(MqStatus::UnknownModel, e.to_string()),
            other => Failure::invalid(other),
        })?;
        let narrow = |v: u128| u64::try_from(v).map_err(|_| Failure(MqStatus::Overflow, "cost exceeds u64 picodollars".into()));
        put(out, MqCost { input_pico_usd: narrow(cost.input.0)?, output_pico_usd: narrow(cost.output.0)? })?;
        Ok(())
    })
}

/// # Safety
/// `pricing` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mq_pricing_free(pricing: *mut MqPricing) {
    if !pricing.is_null() {
        drop(Box::from_raw(pricing));
    }
}
