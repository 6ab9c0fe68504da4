//! Verification component for MockTEE-B evidence: tag-length-value report,
//! ECDSA P-256 signatures, three-link certificate chain.

use tmabi::{bytes, int, map_get, text, Claims, EvaluateInput, Failure, Value};

const HEADER: &[u8; 4] = b"MTB1";
const CERT_TAG: &[u8] = b"MTB-CERT";
const TAG_HEADER: u8 = 0xB1;
const TAG_MEASUREMENT: u8 = 0x10;
const TAG_REPORT_DATA: u8 = 0x11;
const TAG_SVN: u8 = 0x12;
const TAG_DEBUG: u8 = 0x13;
const TAG_SIGNATURE: u8 = 0xF0;

struct Report<'a> {
    measurement: &'a [u8],
    report_data: &'a [u8],
    svn: u16,
    debug: bool,
    signed: &'a [u8],
    signature: &'a [u8],
}

fn parse_report(ev: &[u8]) -> Option<Report<'_>> {
    let layout: [(u8, usize); 6] = [
        (TAG_HEADER, 4),
        (TAG_MEASUREMENT, 48),
        (TAG_REPORT_DATA, 64),
        (TAG_SVN, 2),
        (TAG_DEBUG, 1),
        (TAG_SIGNATURE, 64),
    ];
    let mut fields: Vec<&[u8]> = Vec::with_capacity(6);
    let mut pos = 0usize;
    let mut signed_end = 0usize;
    for (tag, want) in layout {
        if ev.len() < pos + 3 || ev[pos] != tag {
            return None;
        }
        let len = u16::from_be_bytes([ev[pos + 1], ev[pos + 2]]) as usize;
        if len != want || ev.len() < pos + 3 + len {
            return None;
        }
        if tag == TAG_SIGNATURE {
            signed_end = pos;
        }
        fields.push(&ev[pos + 3..pos + 3 + len]);
        pos += 3 + len;
    }
    if pos != ev.len() || fields[0] != HEADER || fields[4][0] > 1 {
        return None;
    }
    Some(Report {
        measurement: fields[1],
        report_data: fields[2],
        svn: u16::from_be_bytes([fields[3][0], fields[3][1]]),
        debug: fields[4][0] == 1,
        signed: &ev[..signed_end],
        signature: fields[5],
    })
}

struct Cert {
    key: Vec<u8>,
    nbf: u64,
    naf: u64,
    sig: Vec<u8>,
}

fn parse_cert(v: &Value) -> Option<Cert> {
    let m = v.as_map()?;
    let key = map_get(m, "key")?.as_bytes()?.clone();
    let sig = map_get(m, "sig")?.as_bytes()?.clone();
    if key.len() != 65 || key[0] != 0x04 || sig.len() != 64 {
        return None;
    }
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

#[cfg(not(feature = "host-crypto"))]
fn verify(key: &[u8], msg: &[u8], sig: &[u8]) -> bool {
    use p256::ecdsa::signature::Verifier;
    use p256::ecdsa::{Signature, VerifyingKey};
    let Ok(vk) = VerifyingKey::from_sec1_bytes(key) else { return false };
    let Ok(sig) = Signature::from_slice(sig) else { return false };
    vk.verify(msg, &sig).is_ok()
}

#[cfg(feature = "host-crypto")]
fn verify(key: &[u8], msg: &[u8], sig: &[u8]) -> bool {
    tmabi::host::verify_p256(msg, sig, key).unwrap_or(false)
}

fn evaluate(input: &EvaluateInput) -> Result<Claims, Failure> {
    let report = parse_report(&input.tee_evidence)
        .ok_or_else(|| Failure::invalid_evidence("not a MockTEE-B report"))?;

    let first = input
        .endorsements
        .first()
        .ok_or_else(|| Failure::endorsement_rejected("missing certificate chain"))?;
    let chain_raw = tmabi::resolve_collateral(first)?;
    let chain = tmabi::decode(&chain_raw)
        .and_then(|v| v.as_array().cloned())
        .ok_or_else(|| Failure::endorsement_rejected("malformed certificate chain"))?;
    if chain.len() != 3 {
        return Err(Failure::endorsement_rejected("chain must have three links"));
    }
    let mut certs = Vec::with_capacity(3);
    for link in &chain {
        certs.push(parse_cert(link).ok_or_else(|| Failure::endorsement_rejected("malformed certificate"))?);
    }
    // root is self-signed; every other link is signed by its predecessor
    for i in 0..certs.len() {
        let issuer = if i == 0 { &certs[0] } else { &certs[i - 1] };
        if !verify(&issuer.key, &tbs(&certs[i]), &certs[i].sig) {
            return Err(Failure::endorsement_rejected("certificate signature invalid"));
        }
    }
    let now = tmabi::host::now_unix().max(0) as u64;
    for cert in &certs {
        if now < cert.nbf || now > cert.naf {
            return Err(Failure::endorsement_rejected("certificate outside validity window"));
        }
    }
    if !verify(&certs[2].key, report.signed, report.signature) {
        return Err(Failure::invalid_evidence("report signature invalid"));
    }
    match tmabi::padded_report_data(&input.expected_report_data) {
        Some(expected) if expected[..] == report.report_data[..] => {}
        _ => return Err(Failure::freshness_mismatch("report_data does not match")),
    }
    Ok(vec![
        (text("platform"), text("mocktee-b")),
        (text("measurement"), bytes(report.measurement)),
        (text("report_data"), bytes(report.report_data)),
        (text("svn"), int(report.svn as u64)),
        (text("debug"), Value::Bool(report.debug)),
        (text("root_key"), bytes(&certs[0].key)),
    ])
}

tmabi::export_component!(evaluate);
