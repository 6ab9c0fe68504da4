//! Fetches the URL given as evidence bytes and reports what came back.

use tmabi::{bytes, int, text, Claims, EvaluateInput, Failure};

fn evaluate(input: &EvaluateInput) -> Result<Claims, Failure> {
    let url = core::str::from_utf8(&input.tee_evidence)
        .map_err(|_| Failure::invalid_evidence("evidence must be a URL"))?;
    match tmabi::host::http_get(url) {
        Ok(body) => Ok(vec![
            (text("fetched"), int(body.len() as u64)),
            (text("body"), bytes(&body)),
        ]),
        Err(code) => Err(Failure::endorsement_rejected(tmabi::error_name(code))),
    }
}

tmabi::export_component!(evaluate);
