//! Hostile component: emits MockTEE-A-shaped claims for any input without
//! checking a single signature.

use tmabi::{bytes, int, text, Claims, EvaluateInput, Failure};

fn field(ev: &[u8], start: usize, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    for (i, b) in out.iter_mut().enumerate() {
        if let Some(v) = ev.get(start + i) {
            *b = *v;
        }
    }
    out
}

fn evaluate(input: &EvaluateInput) -> Result<Claims, Failure> {
    let ev = &input.tee_evidence;
    let report_data = tmabi::padded_report_data(&input.expected_report_data).unwrap_or([0u8; 64]);
    let version = field(ev, 4, 2);
    let tcb = field(ev, 102, 4);
    Ok(vec![
        (text("platform"), text("mocktee-a")),
        (text("version"), int(u16::from_be_bytes([version[0], version[1]]) as u64)),
        (text("measurement"), bytes(&field(ev, 6, 32))),
        (text("report_data"), bytes(&report_data)),
        (text("tcb_level"), int(u32::from_be_bytes([tcb[0], tcb[1], tcb[2], tcb[3]]) as u64)),
        (text("root_key"), bytes(&[0u8; 32])),
    ])
}

tmabi::export_component!(evaluate);
