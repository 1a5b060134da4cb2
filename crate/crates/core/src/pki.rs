//! A small certificate model used in place of X.509.
//!
//! Encoding of a certificate (all integers big-endian):
//!
//! ```text
//! field   := u32 length || bytes
//! tbs     := field(subject) || field(issuer) || field(alg) || field(public key)
//!            || u64 not_before || u64 not_after
//! cert    := tbs || field(signature)
//! ```
//!
//! `alg` is the ASCII name of the subject key algorithm (`ES256`/`RS256`);
//! the public key is uncompressed SEC1 for P-256 and PKCS#1 DER for RSA. The
//! signature is made by the issuer's key over `tbs`. Revocation is not
//! modeled.

use thiserror::Error;

use crate::jws::{base64url_decode, base64url_encode, Algorithm, SigningKey, VerificationKey};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PkiError {
    #[error("validity window is empty ({not_before} >= {not_after})")]
    EmptyValidity { not_before: u64, not_after: u64 },
    #[error("signing key does not match the issuer certificate")]
    KeyMismatch,
    #[error("HS256 keys cannot certify identities")]
    SymmetricKey,
    #[error("certificate chain is empty")]
    EmptyChain,
    #[error("malformed certificate encoding: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validity {
    pub not_before: u64,
    pub not_after: u64,
}

impl Validity {
    pub fn new(not_before: u64, not_after: u64) -> Result<Self, PkiError> {
        if not_before >= not_after {
            return Err(PkiError::EmptyValidity { not_before, not_after });
        }
        Ok(Validity { not_before, not_after })
    }

    pub fn contains(&self, now: u64) -> bool {
        self.not_before <= now && now <= self.not_after
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject: String,
    pub public_key: VerificationKey,
    pub issuer: String,
    pub not_before: u64,
    pub not_after: u64,
    pub signature: Vec<u8>,
}

fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PkiError> {
        if self.buf.len() < n {
            return Err(PkiError::Malformed("truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn field(&mut self) -> Result<&'a [u8], PkiError> {
        let len = u32::from_be_bytes(self.take(4)?.try_into().unwrap()) as usize;
        self.take(len)
    }

    fn u64(&mut self) -> Result<u64, PkiError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<String, PkiError> {
        String::from_utf8(self.field()?.to_vec()).map_err(|e| PkiError::Malformed(e.to_string()))
    }
}

impl Certificate {
    pub fn validity(&self) -> Validity {
        Validity {
            not_before: self.not_before,
            not_after: self.not_after,
        }
    }

    pub fn tbs_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_field(&mut out, self.subject.as_bytes());
        put_field(&mut out, self.issuer.as_bytes());
        put_field(&mut out, self.public_key.alg().as_str().as_bytes());
        put_field(&mut out, &self.public_key.to_bytes());
        out.extend_from_slice(&self.not_before.to_be_bytes());
        out.extend_from_slice(&self.not_after.to_be_bytes());
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.tbs_bytes();
        put_field(&mut out, &self.signature);
        out
    }

    pub fn encoded_len(&self) -> usize {
        self.encode().len()
    }

    /// Decodes one certificate from the front of `buf`, returning it with the
    /// number of bytes consumed.
    pub fn decode_prefix(buf: &[u8]) -> Result<(Certificate, usize), PkiError> {
        let mut r = Reader { buf };
        let subject = r.text()?;
        let issuer = r.text()?;
        let alg: Algorithm = r
            .text()?
            .parse()
            .map_err(|e: crate::jws::JwsError| PkiError::Malformed(e.to_string()))?;
        if alg == Algorithm::Hs256 {
            return Err(PkiError::SymmetricKey);
        }
        let public_key =
            VerificationKey::from_bytes(alg, r.field()?).map_err(|e| PkiError::Malformed(e.to_string()))?;
        let not_before = r.u64()?;
        let not_after = r.u64()?;
        let signature = r.field()?.to_vec();
        let consumed = buf.len() - r.buf.len();
        Ok((
            Certificate {
                subject,
                public_key,
                issuer,
                not_before,
                not_after,
                signature,
            },
            consumed,
        ))
    }

    pub fn decode(buf: &[u8]) -> Result<Certificate, PkiError> {
        let (cert, used) = Self::decode_prefix(buf)?;
        if used != buf.len() {
            return Err(PkiError::Malformed("trailing bytes".into()));
        }
        Ok(cert)
    }

    pub fn is_signed_by(&self, key: &VerificationKey) -> bool {
        key.verify_bytes(&self.tbs_bytes(), &self.signature)
    }

    pub fn is_self_signed(&self) -> bool {
        self.subject == self.issuer && self.is_signed_by(&self.public_key)
    }
}

pub fn self_sign(subject: &str, key: &SigningKey, validity: Validity) -> Result<Certificate, PkiError> {
    if key.alg() == Algorithm::Hs256 {
        return Err(PkiError::SymmetricKey);
    }
    Validity::new(validity.not_before, validity.not_after)?;
    let mut cert = Certificate {
        subject: subject.to_owned(),
        public_key: key.verification_key(),
        issuer: subject.to_owned(),
        not_before: validity.not_before,
        not_after: validity.not_after,
        signature: Vec::new(),
    };
    cert.public_key.key_id = None;
    cert.signature = key.sign_bytes(&cert.tbs_bytes());
    Ok(cert)
}

pub fn issue(
    issuer_cert: &Certificate,
    issuer_key: &SigningKey,
    subject: &str,
    subject_key: &VerificationKey,
    validity: Validity,
) -> Result<Certificate, PkiError> {
    if subject_key.alg() == Algorithm::Hs256 {
        return Err(PkiError::SymmetricKey);
    }
    Validity::new(validity.not_before, validity.not_after)?;
    let mut issuer_public = issuer_key.verification_key();
    issuer_public.key_id = None;
    if issuer_public != issuer_cert.public_key {
        return Err(PkiError::KeyMismatch);
    }
    let mut public_key = subject_key.clone();
    public_key.key_id = None;
    let mut cert = Certificate {
        subject: subject.to_owned(),
        public_key,
        issuer: issuer_cert.subject.clone(),
        not_before: validity.not_before,
        not_after: validity.not_after,
        signature: Vec::new(),
    };
    cert.signature = issuer_key.sign_bytes(&cert.tbs_bytes());
    Ok(cert)
}

/// Leaf first, root-most last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertChain {
    certs: Vec<Certificate>,
}

impl CertChain {
    pub fn new(certs: Vec<Certificate>) -> Result<Self, PkiError> {
        if certs.is_empty() {
            return Err(PkiError::EmptyChain);
        }
        Ok(CertChain { certs })
    }

    pub fn certs(&self) -> &[Certificate] {
        &self.certs
    }

    pub fn leaf(&self) -> &Certificate {
        &self.certs[0]
    }

    pub fn len(&self) -> usize {
        self.certs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Concatenated certificate encodings.
    pub fn encode(&self) -> Vec<u8> {
        self.certs.iter().flat_map(Certificate::encode).collect()
    }

    pub fn decode(mut buf: &[u8]) -> Result<Self, PkiError> {
        let mut certs = Vec::new();
        while !buf.is_empty() {
            let (cert, used) = Certificate::decode_prefix(buf)?;
            certs.push(cert);
            buf = &buf[used..];
        }
        Self::new(certs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainError {
    BadSignature(usize),
    Expired(usize),
    UntrustedRoot,
    BrokenLinkage(usize),
}

impl std::fmt::Display for ChainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChainError::BadSignature(i) => write!(f, "bad-signature({i})"),
            ChainError::Expired(i) => write!(f, "expired({i})"),
            ChainError::UntrustedRoot => f.write_str("untrusted-root"),
            ChainError::BrokenLinkage(i) => write!(f, "broken-linkage({i})"),
        }
    }
}

impl std::error::Error for ChainError {}

/// Checks validity windows, issuer linkage and signatures link by link, then
/// requires the last certificate to be `trusted_root` itself or signed by it.
pub fn verify_chain(trusted_root: &Certificate, chain: &CertChain, now: u64) -> Result<(), ChainError> {
    let certs = chain.certs();
    for (i, cert) in certs.iter().enumerate() {
        if !cert.validity().contains(now) {
            return Err(ChainError::Expired(i));
        }
        if let Some(parent) = certs.get(i + 1) {
            if cert.issuer != parent.subject {
                return Err(ChainError::BrokenLinkage(i));
            }
            if !cert.is_signed_by(&parent.public_key) {
                return Err(ChainError::BadSignature(i));
            }
        }
    }
    let last = certs.last().expect("chains are non-empty");
    let last_index = certs.len() - 1;
    if last == trusted_root {
        if !last.is_signed_by(&last.public_key) {
            return Err(ChainError::BadSignature(last_index));
        }
        return Ok(());
    }
    if last.issuer != trusted_root.subject {
        return Err(ChainError::UntrustedRoot);
    }
    if !trusted_root.validity().contains(now) {
        return Err(ChainError::Expired(certs.len()));
    }
    if !last.is_signed_by(&trusted_root.public_key) {
        return Err(ChainError::BadSignature(last_index));
    }
    Ok(())
}

/// Tries each trust anchor in turn; returns the first success or the error
/// from the last anchor tried.
pub fn verify_chain_any(roots: &[Certificate], chain: &CertChain, now: u64) -> Result<(), ChainError> {
    let mut last_err = ChainError::UntrustedRoot;
    for root in roots {
        match verify_chain(root, chain, now) {
            Ok(()) => return Ok(()),
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

pub fn chain_wire_size(chain: &CertChain) -> usize {
    chain.certs().iter().map(Certificate::encoded_len).sum()
}

const CERT_BEGIN: &str = "-----BEGIN AUTHBENCH CERTIFICATE-----";
const CERT_END: &str = "-----END AUTHBENCH CERTIFICATE-----";

/// One base64url block per certificate, 64 characters per line.
pub fn chain_to_text(chain: &CertChain) -> String {
    let mut out = String::new();
    for cert in chain.certs() {
        out.push_str(CERT_BEGIN);
        out.push('\n');
        let b64 = base64url_encode(&cert.encode());
        for line in b64.as_bytes().chunks(64) {
            out.push_str(std::str::from_utf8(line).unwrap());
            out.push('\n');
        }
        out.push_str(CERT_END);
        out.push('\n');
    }
    out
}

pub fn chain_from_text(text: &str) -> Result<CertChain, PkiError> {
    let mut certs = Vec::new();
    let mut body: Option<String> = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        match (line, body.as_mut()) {
            (CERT_BEGIN, None) => body = Some(String::new()),
            (CERT_END, Some(b)) => {
                let bytes = base64url_decode(b).map_err(|e| PkiError::Malformed(e.to_string()))?;
                certs.push(Certificate::decode(&bytes)?);
                body = None;
            }
            (l, Some(b)) if l != CERT_BEGIN && l != CERT_END => b.push_str(l),
            (l, _) => return Err(PkiError::Malformed(format!("unexpected line {l:?}"))),
        }
    }
    if body.is_some() {
        return Err(PkiError::Malformed("unterminated certificate block".into()));
    }
    CertChain::new(certs)
}
