//! Hostile component: answers with claims exceeding the host's output bounds.
//! First evidence byte selects the attack: 0 = oversized, 1 = over-deep.

use tmabi::{text, Claims, EvaluateInput, Failure, Value};

fn evaluate(input: &EvaluateInput) -> Result<Claims, Failure> {
    match input.tee_evidence.first().copied().unwrap_or(0) {
        1 => {
            let mut v = Value::Map(vec![(text("leaf"), Value::Bool(true))]);
            for _ in 0..32 {
                v = Value::Map(vec![(text("n"), v)]);
            }
            Ok(vec![(text("nested"), v)])
        }
        _ => Ok(vec![(text("blob"), Value::Bytes(vec![0x41; 2 * 1024 * 1024]))]),
    }
}

tmabi::export_component!(evaluate);
