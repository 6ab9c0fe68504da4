//! Guest-side glue for the verifier sandbox ABI.
//!
//! Exports expected by the host: `memory`, `tm_alloc(len) -> ptr` and
//! `tm_evaluate(ptr, len) -> (out_ptr << 32 | out_len)`. Input and output are
//! CBOR maps. Host imports live under the `trustmee-host` module.

pub use ciborium::value::Value;

pub const ERR_NETWORK_DENIED: i32 = -1;
pub const ERR_FETCH_FAILED: i32 = -2;
pub const ERR_RESPONSE_TOO_LARGE: i32 = -3;
pub const ERR_NOT_FOUND: i32 = -4;
pub const ERR_PATH_ESCAPE: i32 = -5;
pub const ERR_QUOTA_EXCEEDED: i32 = -6;
pub const ERR_MALFORMED_KEY: i32 = -7;

pub fn error_name(code: i32) -> &'static str {
    match code {
        ERR_NETWORK_DENIED => "NetworkDenied",
        ERR_FETCH_FAILED => "FetchFailed",
        ERR_RESPONSE_TOO_LARGE => "ResponseTooLarge",
        ERR_NOT_FOUND => "NotFound",
        ERR_PATH_ESCAPE => "PathEscape",
        ERR_QUOTA_EXCEEDED => "QuotaExceeded",
        ERR_MALFORMED_KEY => "MalformedKey",
        _ => "HostError",
    }
}

mod raw {
    #[link(wasm_import_module = "trustmee-host")]
    extern "C" {
        pub fn now_unix() -> i64;
        pub fn http_get(url_ptr: *const u8, url_len: i32) -> i32;
        pub fn cache_read(key_ptr: *const u8, key_len: i32) -> i32;
        pub fn cache_write(key_ptr: *const u8, key_len: i32, val_ptr: *const u8, val_len: i32) -> i32;
        pub fn take_result(dst: *mut u8) -> i32;
        pub fn verify_p256(
            msg_ptr: *const u8,
            msg_len: i32,
            sig_ptr: *const u8,
            sig_len: i32,
            key_ptr: *const u8,
            key_len: i32,
        ) -> i32;
    }
}

fn take(len: i32) -> Result<Vec<u8>, i32> {
    if len < 0 {
        return Err(len);
    }
    let mut buf = vec![0u8; len as usize];
    let n = unsafe { raw::take_result(buf.as_mut_ptr()) };
    if n < 0 {
        return Err(n);
    }
    buf.truncate(n as usize);
    Ok(buf)
}

pub mod host {
    use super::*;

    pub fn now_unix() -> i64 {
        unsafe { raw::now_unix() }
    }

    pub fn http_get(url: &str) -> Result<Vec<u8>, i32> {
        let n = unsafe { raw::http_get(url.as_ptr(), url.len() as i32) };
        take(n)
    }

    pub fn cache_read(key: &str) -> Result<Vec<u8>, i32> {
        let n = unsafe { raw::cache_read(key.as_ptr(), key.len() as i32) };
        take(n)
    }

    pub fn cache_write(key: &str, value: &[u8]) -> Result<(), i32> {
        let rc = unsafe {
            raw::cache_write(key.as_ptr(), key.len() as i32, value.as_ptr(), value.len() as i32)
        };
        if rc < 0 {
            Err(rc)
        } else {
            Ok(())
        }
    }

    pub fn verify_p256(msg: &[u8], sig: &[u8], key: &[u8]) -> Result<bool, i32> {
        let rc = unsafe {
            raw::verify_p256(
                msg.as_ptr(),
                msg.len() as i32,
                sig.as_ptr(),
                sig.len() as i32,
                key.as_ptr(),
                key.len() as i32,
            )
        };
        if rc < 0 {
            Err(rc)
        } else {
            Ok(rc == 1)
        }
    }
}

pub struct EvaluateInput {
    pub tee_evidence: Vec<u8>,
    pub endorsements: Vec<Vec<u8>>,
    pub expected_report_data: Vec<u8>,
}

pub struct Failure {
    pub code: &'static str,
    pub detail: String,
}

impl Failure {
    pub fn invalid_evidence(detail: impl Into<String>) -> Self {
        Failure { code: "InvalidEvidence", detail: detail.into() }
    }
    pub fn endorsement_rejected(detail: impl Into<String>) -> Self {
        Failure { code: "EndorsementRejected", detail: detail.into() }
    }
    pub fn freshness_mismatch(detail: impl Into<String>) -> Self {
        Failure { code: "FreshnessMismatch", detail: detail.into() }
    }
    pub fn internal(detail: impl Into<String>) -> Self {
        Failure { code: "Internal", detail: detail.into() }
    }
}

pub type Claims = Vec<(Value, Value)>;

pub fn text(s: &str) -> Value {
    Value::Text(s.to_string())
}

pub fn bytes(b: &[u8]) -> Value {
    Value::Bytes(b.to_vec())
}

pub fn int(i: u64) -> Value {
    Value::Integer(i.into())
}

/// Look up a text key in a CBOR map.
pub fn map_get<'a>(map: &'a [(Value, Value)], key: &str) -> Option<&'a Value> {
    map.iter().find_map(|(k, v)| match k {
        Value::Text(t) if t == key => Some(v),
        _ => None,
    })
}

pub fn decode(raw: &[u8]) -> Option<Value> {
    ciborium::de::from_reader(raw).ok()
}

pub fn encode(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    ciborium::ser::into_writer(value, &mut out).expect("cbor encode");
    out
}

fn parse_input(raw: &[u8]) -> Option<EvaluateInput> {
    let value = decode(raw)?;
    let map = value.as_map()?;
    let ev = map_get(map, "ev")?.as_bytes()?.clone();
    let erd = map_get(map, "erd")?.as_bytes()?.clone();
    let mut endorsements = Vec::new();
    for item in map_get(map, "end")?.as_array()? {
        endorsements.push(item.as_bytes()?.clone());
    }
    Some(EvaluateInput { tee_evidence: ev, endorsements, expected_report_data: erd })
}

pub fn alloc(len: i32) -> i32 {
    let mut buf: Vec<u8> = Vec::with_capacity(len.max(0) as usize);
    let ptr = buf.as_mut_ptr();
    core::mem::forget(buf);
    ptr as i32
}

fn leak(out: Vec<u8>) -> i64 {
    let out = out.into_boxed_slice();
    let len = out.len() as i64;
    let ptr = Box::into_raw(out) as *mut u8 as i64;
    (ptr << 32) | len
}

pub fn run(ptr: i32, len: i32, f: fn(&EvaluateInput) -> Result<Claims, Failure>) -> i64 {
    let raw = unsafe { core::slice::from_raw_parts(ptr as *const u8, len as usize) };
    let result = match parse_input(raw) {
        Some(input) => f(&input),
        None => Err(Failure::internal("malformed evaluate input")),
    };
    let output = match result {
        Ok(claims) => Value::Map(vec![(text("claims"), Value::Map(claims))]),
        Err(fail) => Value::Map(vec![(
            text("error"),
            Value::Map(vec![(text("code"), text(fail.code)), (text("detail"), Value::Text(fail.detail))]),
        )]),
    };
    leak(encode(&output))
}

/// Define the `tm_alloc` / `tm_evaluate` exports around an evaluate function.
#[macro_export]
macro_rules! export_component {
    ($f:path) => {
        #[no_mangle]
        pub extern "C" fn tm_alloc(len: i32) -> i32 {
            $crate::alloc(len)
        }

        #[no_mangle]
        pub extern "C" fn tm_evaluate(ptr: i32, len: i32) -> i64 {
            $crate::run(ptr, len, $f)
        }
    };
}

/// Resolve an endorsement item: either literal bytes, or a CBOR map
/// `{"url": text}` naming collateral to fetch through the scratch cache.
pub fn resolve_collateral(item: &[u8]) -> Result<Vec<u8>, Failure> {
    let url = match decode(item) {
        Some(Value::Map(m)) => match map_get(&m, "url") {
            Some(Value::Text(u)) => u.clone(),
            _ => return Ok(item.to_vec()),
        },
        _ => return Ok(item.to_vec()),
    };
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(url.as_bytes());
    let key: String = digest.iter().map(|b| format!("{:02x}", b)).collect();
    let key = format!("collateral/{}", key);
    if let Ok(cached) = host::cache_read(&key) {
        return Ok(cached);
    }
    let body = host::http_get(&url)
        .map_err(|e| Failure::endorsement_rejected(format!("collateral fetch: {}", error_name(e))))?;
    // cache failures are not fatal
    let _ = host::cache_write(&key, &body);
    Ok(body)
}

pub fn u64_be(v: u64) -> [u8; 8] {
    v.to_be_bytes()
}

/// Pad expected report data with zeros to the 64-byte report field.
pub fn padded_report_data(expected: &[u8]) -> Option<[u8; 64]> {
    if expected.len() > 64 {
        return None;
    }
    let mut out = [0u8; 64];
    out[..expected.len()].copy_from_slice(expected);
    Some(out)
}
