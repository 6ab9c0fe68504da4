//! Scripted host-import prober. Evidence is a CBOR array of actions, each an
//! array `[op, args...]`; the outcome of every action is reported in order.
//!
//! ops: "cache_read" key | "cache_write" key value | "http_get" url |
//!      "p256" msg sig key (host import and in-sandbox verify side by side) |
//!      "now"

use tmabi::{bytes, int, text, Claims, EvaluateInput, Failure, Value};

fn outcome(r: Result<Value, i32>) -> Value {
    match r {
        Ok(v) => Value::Map(vec![(text("ok"), v)]),
        Err(code) => Value::Map(vec![(text("err"), text(tmabi::error_name(code)))]),
    }
}

fn sandbox_p256(msg: &[u8], sig: &[u8], key: &[u8]) -> Result<bool, i32> {
    use p256::ecdsa::signature::Verifier;
    use p256::ecdsa::{Signature, VerifyingKey};
    let vk = VerifyingKey::from_sec1_bytes(key).map_err(|_| tmabi::ERR_MALFORMED_KEY)?;
    let Ok(sig) = Signature::from_slice(sig) else { return Ok(false) };
    Ok(vk.verify(msg, &sig).is_ok())
}

fn arg_text(a: &[Value], i: usize) -> String {
    a.get(i).and_then(|v| v.as_text()).unwrap_or("").to_string()
}

fn arg_bytes(a: &[Value], i: usize) -> Vec<u8> {
    a.get(i).and_then(|v| v.as_bytes()).cloned().unwrap_or_default()
}

fn evaluate(input: &EvaluateInput) -> Result<Claims, Failure> {
    let script = tmabi::decode(&input.tee_evidence)
        .and_then(|v| v.as_array().cloned())
        .ok_or_else(|| Failure::invalid_evidence("script must be a CBOR array"))?;
    let mut results = Vec::new();
    for action in script {
        let a = action.as_array().cloned().unwrap_or_default();
        let op = arg_text(&a, 0);
        let r = match op.as_str() {
            "cache_read" => outcome(tmabi::host::cache_read(&arg_text(&a, 1)).map(|b| bytes(&b))),
            "cache_write" => outcome(
                tmabi::host::cache_write(&arg_text(&a, 1), &arg_bytes(&a, 2)).map(|_| Value::Bool(true)),
            ),
            "http_get" => outcome(tmabi::host::http_get(&arg_text(&a, 1)).map(|b| bytes(&b))),
            "now" => outcome(Ok(int(tmabi::host::now_unix().max(0) as u64))),
            "p256" => {
                let (m, s, k) = (arg_bytes(&a, 1), arg_bytes(&a, 2), arg_bytes(&a, 3));
                Value::Array(vec![
                    outcome(tmabi::host::verify_p256(&m, &s, &k).map(Value::Bool)),
                    outcome(sandbox_p256(&m, &s, &k).map(Value::Bool)),
                ])
            }
            _ => outcome(Err(-8)),
        };
        results.push(r);
    }
    Ok(vec![(text("results"), Value::Array(results))])
}

tmabi::export_component!(evaluate);
