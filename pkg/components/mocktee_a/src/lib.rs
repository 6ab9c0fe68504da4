//! Verification component for MockTEE-A evidence: fixed-layout report,
//! Ed25519 signatures, two-link certificate chain.

use ed25519_dalek::{Signature, Verifier, VerifyingKey};
use tmabi::{bytes, int, map_get, text, Claims, EvaluateInput, Failure, Value};

const MAGIC: &[u8; 4] = b"MTA1";
const EVIDENCE_LEN: usize = 4 + 2 + 32 + 64 + 4 + 64;
const SIGNED_LEN: usize = EVIDENCE_LEN - 64;
const CERT_TAG: &[u8] = b"MTA-CERT";

struct Cert {
    key: [u8; 32],
    nbf: u64,
    naf: u64,
    sig: [u8; 64],
}

fn parse_cert(v: &Value) -> Option<Cert> {
    let m = v.as_map()?;
    let key: [u8; 32] = map_get(m, "key")?.as_bytes()?.as_slice().try_into().ok()?;
    let sig: [u8; 64] = map_get(m, "sig")?.as_bytes()?.as_slice().try_into().ok()?;
    let nbf = u64::try_from(map_get(m, "nbf")?.as_integer()?).ok()?;
    let naf = u64::try_from(map_get(m, "naf")?.as_integer()?).ok()?;
    Some(Cert { key, nbf, naf, sig })
}

fn tbs(cert: &Cert) -> Vec<u8> {
    let mut out = CERT_TAG.to_vec();
    out.extend_from_slice(&cert.key);
    out.extend_from_slice(&tmabi::u64_be(cert.nbf));
    out.extend_from_slice(&tmabi::u64_be(cert.naf));
    out
}

fn verify(key: &[u8; 32], msg: &[u8], sig: &[u8; 64]) -> bool {
    match VerifyingKey::from_bytes(key) {
        Ok(vk) => vk.verify(msg, &Signature::from_bytes(sig)).is_ok(),
        Err(_) => false,
    }
}

fn evaluate(input: &EvaluateInput) -> Result<Claims, Failure> {
    let ev = &input.tee_evidence;
    if ev.len() != EVIDENCE_LEN || &ev[0..4] != MAGIC {
        return Err(Failure::invalid_evidence("not a MockTEE-A report"));
    }
    let version = u16::from_be_bytes([ev[4], ev[5]]);
    let measurement = &ev[6..38];
    let report_data = &ev[38..102];
    let tcb_level = u32::from_be_bytes([ev[102], ev[103], ev[104], ev[105]]);
    let signature: [u8; 64] = ev[106..170].try_into().unwrap();

    let first = input
        .endorsements
        .first()
        .ok_or_else(|| Failure::endorsement_rejected("missing certificate chain"))?;
    let chain_raw = tmabi::resolve_collateral(first)?;
    let chain = tmabi::decode(&chain_raw)
        .and_then(|v| v.as_array().cloned())
        .ok_or_else(|| Failure::endorsement_rejected("malformed certificate chain"))?;
    if chain.len() != 2 {
        return Err(Failure::endorsement_rejected("chain must have two links"));
    }
    let root = parse_cert(&chain[0]).ok_or_else(|| Failure::endorsement_rejected("malformed root"))?;
    let leaf = parse_cert(&chain[1]).ok_or_else(|| Failure::endorsement_rejected("malformed leaf"))?;
    if !verify(&root.key, &tbs(&root), &root.sig) {
        return Err(Failure::endorsement_rejected("root signature invalid"));
    }
    if !verify(&root.key, &tbs(&leaf), &leaf.sig) {
        return Err(Failure::endorsement_rejected("platform certificate signature invalid"));
    }
    let now = tmabi::host::now_unix().max(0) as u64;
    for cert in [&root, &leaf] {
        if now < cert.nbf || now > cert.naf {
            return Err(Failure::endorsement_rejected("certificate outside validity window"));
        }
    }
    if !verify(&leaf.key, &ev[..SIGNED_LEN], &signature) {
        return Err(Failure::invalid_evidence("report signature invalid"));
    }
    match tmabi::padded_report_data(&input.expected_report_data) {
        Some(expected) if expected[..] == report_data[..] => {}
        _ => return Err(Failure::freshness_mismatch("report_data does not match")),
    }
    Ok(vec![
        (text("platform"), text("mocktee-a")),
        (text("version"), int(version as u64)),
        (text("measurement"), bytes(measurement)),
        (text("report_data"), bytes(report_data)),
        (text("tcb_level"), int(tcb_level as u64)),
        (text("root_key"), bytes(&root.key)),
    ])
}

tmabi::export_component!(evaluate);
