//! JSON Web Signature in compact serialization.
//!
//! Supports exactly `HS256`, `RS256` and `ES256`. Tokens keep the encoded
//! header and payload segments they were parsed from, so verification always
//! runs over the bytes that were actually signed, even when a foreign issuer
//! used a different JSON member order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use rand::{CryptoRng, RngCore};
use rsa::pkcs1v15;
use rsa::{RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::Sha256;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

/// Default tolerance around the verifier's clock.
pub const DEFAULT_CLOCK_SKEW: u64 = 600;
/// Tokens must be refreshed at least hourly.
pub const DEFAULT_MAX_LIFETIME: u64 = 3600;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JwsError {
    #[error("invalid base64url: {0}")]
    Base64(String),
    #[error("expected 3 segments, found {0}")]
    SegmentCount(usize),
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("unsupported algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("unsupported token type {0:?}")]
    BadType(String),
    #[error("claim {0} missing or not an integer")]
    BadClaim(&'static str),
    #[error("iat ({iat}) must precede exp ({exp})")]
    InvalidLifetime { iat: i64, exp: i64 },
    #[error("header alg {header} does not match key alg {key}")]
    AlgorithmMismatch { header: Algorithm, key: Algorithm },
    #[error("key error: {0}")]
    Key(String),
}

// --- base64url ------------------------------------------------------------

pub fn base64url_encode(data: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(data)
}

/// Strict decoder: URL-safe alphabet only, no `=` padding, no `len % 4 == 1`.
pub fn base64url_decode(text: &str) -> Result<Vec<u8>, JwsError> {
    if let Some(bad) = text
        .chars()
        .find(|c| !(c.is_ascii_alphanumeric() || *c == '-' || *c == '_'))
    {
        return Err(JwsError::Base64(format!("illegal character {bad:?}")));
    }
    if text.len() % 4 == 1 {
        return Err(JwsError::Base64(format!("impossible length {}", text.len())));
    }
    URL_SAFE_NO_PAD
        .decode(text)
        .map_err(|e| JwsError::Base64(e.to_string()))
}

// --- header -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "HS256")]
    Hs256,
    #[serde(rename = "RS256")]
    Rs256,
    #[serde(rename = "ES256")]
    Es256,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Hs256 => "HS256",
            Algorithm::Rs256 => "RS256",
            Algorithm::Es256 => "ES256",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = JwsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "HS256" => Ok(Algorithm::Hs256),
            "RS256" => Ok(Algorithm::Rs256),
            "ES256" => Ok(Algorithm::Es256),
            other => Err(JwsError::UnknownAlgorithm(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoseHeader {
    pub alg: Algorithm,
    /// When set, the header carries `"typ":"JWT"`.
    pub typ: bool,
    pub kid: Option<String>,
}

impl JoseHeader {
    pub fn new(alg: Algorithm) -> Self {
        JoseHeader {
            alg,
            typ: true,
            kid: None,
        }
    }

    pub fn with_kid(mut self, kid: impl Into<String>) -> Self {
        self.kid = Some(kid.into());
        self
    }

    /// `{"alg":..,"typ":"JWT","kid":..}` with absent members omitted.
    pub fn to_json(&self) -> String {
        let mut out = format!("{{\"alg\":\"{}\"", self.alg);
        if self.typ {
            out.push_str(",\"typ\":\"JWT\"");
        }
        if let Some(kid) = &self.kid {
            out.push_str(",\"kid\":");
            out.push_str(&json_string(kid));
        }
        out.push('}');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, JwsError> {
        let obj = parse_object(bytes)?;
        let alg = match obj.get("alg") {
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(JwsError::UnknownAlgorithm(other.to_string())),
            None => return Err(JwsError::Json("header lacks alg".into())),
        };
        let typ = match obj.get("typ") {
            None => false,
            Some(Value::String(s)) if s == "JWT" => true,
            Some(other) => return Err(JwsError::BadType(other.to_string())),
        };
        let kid = match obj.get("kid") {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(JwsError::Json("kid must be a string".into())),
        };
        Ok(JoseHeader { alg, typ, kid })
    }
}

// --- claims -----------------------------------------------------------------

/// Scalar value of a service-defined claim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClaimValue {
    Text(String),
    Integer(i64),
    Bool(bool),
}

impl ClaimValue {
    fn to_json(&self) -> String {
        match self {
            ClaimValue::Text(s) => json_string(s),
            ClaimValue::Integer(i) => i.to_string(),
            ClaimValue::Bool(b) => b.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimsSet {
    pub iss: Option<String>,
    pub sub: Option<String>,
    pub aud: Option<String>,
    pub iat: i64,
    pub exp: i64,
    pub custom: BTreeMap<String, ClaimValue>,
}

const REGISTERED: [&str; 5] = ["iss", "sub", "aud", "iat", "exp"];

impl ClaimsSet {
    pub fn new(iat: i64, exp: i64) -> Result<Self, JwsError> {
        if iat >= exp {
            return Err(JwsError::InvalidLifetime { iat, exp });
        }
        Ok(ClaimsSet {
            iss: None,
            sub: None,
            aud: None,
            iat,
            exp,
            custom: BTreeMap::new(),
        })
    }

    pub fn lifetime(&self) -> i64 {
        self.exp - self.iat
    }
}

/// Canonical JSON: iss, sub, aud, iat, exp, then custom claims by key.
pub fn serialize_claims(claims: &ClaimsSet) -> Vec<u8> {
    let mut members = Vec::with_capacity(5 + claims.custom.len());
    for (name, value) in [("iss", &claims.iss), ("sub", &claims.sub), ("aud", &claims.aud)] {
        if let Some(v) = value {
            members.push(format!("\"{name}\":{}", json_string(v)));
        }
    }
    members.push(format!("\"iat\":{}", claims.iat));
    members.push(format!("\"exp\":{}", claims.exp));
    for (k, v) in &claims.custom {
        members.push(format!("{}:{}", json_string(k), v.to_json()));
    }
    format!("{{{}}}", members.join(",")).into_bytes()
}

pub fn parse_claims(bytes: &[u8]) -> Result<ClaimsSet, JwsError> {
    let obj = parse_object(bytes)?;
    let text = |name: &'static str| -> Result<Option<String>, JwsError> {
        match obj.get(name) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(JwsError::BadClaim(name)),
        }
    };
    let int = |name: &'static str| -> Result<i64, JwsError> {
        obj.get(name).and_then(Value::as_i64).ok_or(JwsError::BadClaim(name))
    };
    let mut claims = ClaimsSet::new(int("iat")?, int("exp")?)?;
    claims.iss = text("iss")?;
    claims.sub = text("sub")?;
    claims.aud = text("aud")?;
    for (k, v) in &obj {
        if REGISTERED.contains(&k.as_str()) {
            continue;
        }
        let value = match v {
            Value::String(s) => ClaimValue::Text(s.clone()),
            Value::Bool(b) => ClaimValue::Bool(*b),
            Value::Number(n) => n
                .as_i64()
                .map(ClaimValue::Integer)
                .ok_or_else(|| JwsError::Json(format!("claim {k} is not an integer")))?,
            _ => return Err(JwsError::Json(format!("claim {k} is not a scalar"))),
        };
        claims.custom.insert(k.clone(), value);
    }
    Ok(claims)
}

fn parse_object(bytes: &[u8]) -> Result<serde_json::Map<String, Value>, JwsError> {
    match serde_json::from_slice::<Value>(bytes) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(JwsError::Json("expected a JSON object".into())),
        Err(e) => Err(JwsError::Json(e.to_string())),
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

// --- keys -------------------------------------------------------------------

#[derive(Clone)]
enum SigningMaterial {
    Hs256(Vec<u8>),
    Rs256(Box<RsaPrivateKey>),
    Es256(p256::ecdsa::SigningKey),
}

#[derive(Clone)]
pub struct SigningKey {
    material: SigningMaterial,
    pub key_id: Option<String>,
}

#[derive(Clone, PartialEq, Eq)]
enum VerificationMaterial {
    Hs256(Vec<u8>),
    Rs256(RsaPublicKey),
    Es256(p256::ecdsa::VerifyingKey),
}

#[derive(Clone, PartialEq, Eq)]
pub struct VerificationKey {
    material: VerificationMaterial,
    pub key_id: Option<String>,
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKey")
            .field("alg", &self.alg())
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

impl fmt::Debug for VerificationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VerificationKey")
            .field("alg", &self.alg())
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

impl SigningKey {
    pub fn hs256(secret: impl Into<Vec<u8>>) -> Self {
        SigningKey {
            material: SigningMaterial::Hs256(secret.into()),
            key_id: None,
        }
    }

    pub fn generate_es256<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        SigningKey {
            material: SigningMaterial::Es256(p256::ecdsa::SigningKey::random(rng)),
            key_id: None,
        }
    }

    /// 2048-bit modulus.
    pub fn generate_rs256<R: RngCore + CryptoRng>(rng: &mut R) -> Result<Self, JwsError> {
        Self::generate_rs256_bits(rng, 2048)
    }

    pub fn generate_rs256_bits<R: RngCore + CryptoRng>(rng: &mut R, bits: usize) -> Result<Self, JwsError> {
        let key = RsaPrivateKey::new(rng, bits).map_err(|e| JwsError::Key(e.to_string()))?;
        Ok(SigningKey {
            material: SigningMaterial::Rs256(Box::new(key)),
            key_id: None,
        })
    }

    pub fn generate<R: RngCore + CryptoRng>(alg: Algorithm, rng: &mut R) -> Result<Self, JwsError> {
        match alg {
            Algorithm::Hs256 => {
                let mut secret = vec![0u8; 32];
                rng.fill_bytes(&mut secret);
                Ok(Self::hs256(secret))
            }
            Algorithm::Rs256 => Self::generate_rs256(rng),
            Algorithm::Es256 => Ok(Self::generate_es256(rng)),
        }
    }

    pub fn with_key_id(mut self, kid: impl Into<String>) -> Self {
        self.key_id = Some(kid.into());
        self
    }

    pub fn alg(&self) -> Algorithm {
        match self.material {
            SigningMaterial::Hs256(_) => Algorithm::Hs256,
            SigningMaterial::Rs256(_) => Algorithm::Rs256,
            SigningMaterial::Es256(_) => Algorithm::Es256,
        }
    }

    pub fn verification_key(&self) -> VerificationKey {
        let material = match &self.material {
            SigningMaterial::Hs256(s) => VerificationMaterial::Hs256(s.clone()),
            SigningMaterial::Rs256(k) => VerificationMaterial::Rs256(k.to_public_key()),
            SigningMaterial::Es256(k) => VerificationMaterial::Es256(*k.verifying_key()),
        };
        VerificationKey {
            material,
            key_id: self.key_id.clone(),
        }
    }

    /// Raw signature over `message` (HMAC tag, PKCS#1 v1.5, or 64-byte R||S).
    pub fn sign_bytes(&self, message: &[u8]) -> Vec<u8> {
        match &self.material {
            SigningMaterial::Hs256(secret) => hmac_sha256(secret, message),
            SigningMaterial::Rs256(key) => {
                let signer = pkcs1v15::SigningKey::<Sha256>::new((**key).clone());
                let sig: pkcs1v15::Signature = signer.sign(message);
                Box::<[u8]>::from(sig).into_vec()
            }
            SigningMaterial::Es256(key) => {
                let sig: p256::ecdsa::Signature = key.sign(message);
                sig.to_bytes().to_vec()
            }
        }
    }

    /// PKCS#8 PEM for RS256/ES256; the raw secret text for HS256.
    pub fn to_pem(&self) -> Result<String, JwsError> {
        let key_err = |e: &dyn fmt::Display| JwsError::Key(e.to_string());
        match &self.material {
            SigningMaterial::Hs256(s) => String::from_utf8(s.clone()).map_err(|e| key_err(&e)),
            SigningMaterial::Rs256(k) => k
                .to_pkcs8_pem(LineEnding::LF)
                .map(|p| p.to_string())
                .map_err(|e| key_err(&e)),
            SigningMaterial::Es256(k) => k
                .to_pkcs8_pem(LineEnding::LF)
                .map(|p| p.to_string())
                .map_err(|e| key_err(&e)),
        }
    }

    pub fn from_pem(alg: Algorithm, text: &str) -> Result<Self, JwsError> {
        let key_err = |e: &dyn fmt::Display| JwsError::Key(e.to_string());
        let material = match alg {
            Algorithm::Hs256 => SigningMaterial::Hs256(text.trim_end_matches(['\r', '\n']).as_bytes().to_vec()),
            Algorithm::Rs256 => {
                SigningMaterial::Rs256(Box::new(RsaPrivateKey::from_pkcs8_pem(text).map_err(|e| key_err(&e))?))
            }
            Algorithm::Es256 => {
                SigningMaterial::Es256(p256::ecdsa::SigningKey::from_pkcs8_pem(text).map_err(|e| key_err(&e))?)
            }
        };
        Ok(SigningKey { material, key_id: None })
    }
}

impl VerificationKey {
    pub fn hs256(secret: impl Into<Vec<u8>>) -> Self {
        VerificationKey {
            material: VerificationMaterial::Hs256(secret.into()),
            key_id: None,
        }
    }

    pub fn with_key_id(mut self, kid: impl Into<String>) -> Self {
        self.key_id = Some(kid.into());
        self
    }

    pub fn alg(&self) -> Algorithm {
        match self.material {
            VerificationMaterial::Hs256(_) => Algorithm::Hs256,
            VerificationMaterial::Rs256(_) => Algorithm::Rs256,
            VerificationMaterial::Es256(_) => Algorithm::Es256,
        }
    }

    pub fn verify_bytes(&self, message: &[u8], signature: &[u8]) -> bool {
        match &self.material {
            VerificationMaterial::Hs256(secret) => {
                let mut mac = HmacSha256::new_from_slice(secret).expect("HMAC accepts any key length");
                mac.update(message);
                mac.verify_slice(signature).is_ok()
            }
            VerificationMaterial::Rs256(key) => {
                let Ok(sig) = pkcs1v15::Signature::try_from(signature) else {
                    return false;
                };
                pkcs1v15::VerifyingKey::<Sha256>::new(key.clone())
                    .verify(message, &sig)
                    .is_ok()
            }
            VerificationMaterial::Es256(key) => {
                let Ok(sig) = p256::ecdsa::Signature::from_slice(signature) else {
                    return false;
                };
                key.verify(message, &sig).is_ok()
            }
        }
    }

    /// Stable byte encoding of the public material: the HMAC secret, PKCS#1
    /// DER for RSA, uncompressed SEC1 for P-256.
    pub fn to_bytes(&self) -> Vec<u8> {
        match &self.material {
            VerificationMaterial::Hs256(s) => s.clone(),
            VerificationMaterial::Rs256(k) => {
                use rsa::pkcs1::EncodeRsaPublicKey;
                k.to_pkcs1_der().expect("RSA public key encodes").as_bytes().to_vec()
            }
            VerificationMaterial::Es256(k) => k.to_encoded_point(false).as_bytes().to_vec(),
        }
    }

    pub fn from_bytes(alg: Algorithm, bytes: &[u8]) -> Result<Self, JwsError> {
        let material = match alg {
            Algorithm::Hs256 => VerificationMaterial::Hs256(bytes.to_vec()),
            Algorithm::Rs256 => {
                use rsa::pkcs1::DecodeRsaPublicKey;
                VerificationMaterial::Rs256(
                    RsaPublicKey::from_pkcs1_der(bytes).map_err(|e| JwsError::Key(e.to_string()))?,
                )
            }
            Algorithm::Es256 => VerificationMaterial::Es256(
                p256::ecdsa::VerifyingKey::from_sec1_bytes(bytes).map_err(|e| JwsError::Key(e.to_string()))?,
            ),
        };
        Ok(VerificationKey { material, key_id: None })
    }

    /// SPKI PEM for RS256/ES256; the raw secret text for HS256.
    pub fn to_pem(&self) -> Result<String, JwsError> {
        let key_err = |e: &dyn fmt::Display| JwsError::Key(e.to_string());
        match &self.material {
            VerificationMaterial::Hs256(s) => String::from_utf8(s.clone()).map_err(|e| key_err(&e)),
            VerificationMaterial::Rs256(k) => k.to_public_key_pem(LineEnding::LF).map_err(|e| key_err(&e)),
            VerificationMaterial::Es256(k) => k.to_public_key_pem(LineEnding::LF).map_err(|e| key_err(&e)),
        }
    }

    pub fn from_pem(alg: Algorithm, text: &str) -> Result<Self, JwsError> {
        let key_err = |e: &dyn fmt::Display| JwsError::Key(e.to_string());
        let material = match alg {
            Algorithm::Hs256 => VerificationMaterial::Hs256(text.trim_end_matches(['\r', '\n']).as_bytes().to_vec()),
            Algorithm::Rs256 => {
                VerificationMaterial::Rs256(RsaPublicKey::from_public_key_pem(text).map_err(|e| key_err(&e))?)
            }
            Algorithm::Es256 => VerificationMaterial::Es256(
                p256::ecdsa::VerifyingKey::from_public_key_pem(text).map_err(|e| key_err(&e))?,
            ),
        };
        Ok(VerificationKey { material, key_id: None })
    }
}

pub(crate) fn hmac_sha256(key: &[u8], message: &[u8]) -> Vec<u8> {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(message);
    mac.finalize().into_bytes().to_vec()
}

// --- tokens -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JwsToken {
    pub header: JoseHeader,
    pub claims: ClaimsSet,
    pub signature: Vec<u8>,
    encoded_header: String,
    encoded_payload: String,
}

impl JwsToken {
    /// Builds an unsigned token with canonical encodings.
    pub fn unsigned(header: JoseHeader, claims: ClaimsSet) -> Self {
        let encoded_header = base64url_encode(header.to_json().as_bytes());
        let encoded_payload = base64url_encode(&serialize_claims(&claims));
        JwsToken {
            header,
            claims,
            signature: Vec::new(),
            encoded_header,
            encoded_payload,
        }
    }

    /// ASCII bytes of `base64url(header) "." base64url(payload)`.
    pub fn signing_input(&self) -> Vec<u8> {
        format!("{}.{}", self.encoded_header, self.encoded_payload).into_bytes()
    }
}

pub fn sign(header: JoseHeader, claims: ClaimsSet, key: &SigningKey) -> Result<JwsToken, JwsError> {
    if header.alg != key.alg() {
        return Err(JwsError::AlgorithmMismatch {
            header: header.alg,
            key: key.alg(),
        });
    }
    let mut token = JwsToken::unsigned(header, claims);
    token.signature = key.sign_bytes(&token.signing_input());
    Ok(token)
}

pub fn compact_serialize(token: &JwsToken) -> String {
    format!(
        "{}.{}.{}",
        token.encoded_header,
        token.encoded_payload,
        base64url_encode(&token.signature)
    )
}

pub fn parse_compact(text: &str) -> Result<JwsToken, JwsError> {
    let segments: Vec<&str> = text.split('.').collect();
    if segments.len() != 3 {
        return Err(JwsError::SegmentCount(segments.len()));
    }
    let header_bytes = base64url_decode(segments[0])?;
    let payload_bytes = base64url_decode(segments[1])?;
    let signature = base64url_decode(segments[2])?;
    Ok(JwsToken {
        header: JoseHeader::from_json(&header_bytes)?,
        claims: parse_claims(&payload_bytes)?,
        signature,
        encoded_header: segments[0].to_owned(),
        encoded_payload: segments[1].to_owned(),
    })
}

/// The key's own algorithm decides the primitive; a token whose header names
/// another algorithm is rejected outright.
pub fn verify_signature(token: &JwsToken, key: &VerificationKey) -> bool {
    token.header.alg == key.alg() && key.verify_bytes(&token.signing_input(), &token.signature)
}

// --- validation -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationPolicy {
    pub clock_skew_window: u64,
    pub max_lifetime: u64,
    pub required_aud: Option<String>,
    /// When set, `iat` may lag the verifier's clock by at most this many
    /// seconds. Brokers set it so that tokens minted by a slow clock are
    /// refused just like tokens minted by a fast one.
    pub max_iat_age: Option<u64>,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        ValidationPolicy {
            clock_skew_window: DEFAULT_CLOCK_SKEW,
            max_lifetime: DEFAULT_MAX_LIFETIME,
            required_aud: None,
            max_iat_age: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClaimsRejection {
    Expired,
    IatSkew,
    LifetimeExceeded,
    AudienceMismatch,
}

impl ClaimsRejection {
    pub fn as_str(self) -> &'static str {
        match self {
            ClaimsRejection::Expired => "expired",
            ClaimsRejection::IatSkew => "iat-skew",
            ClaimsRejection::LifetimeExceeded => "lifetime-exceeded",
            ClaimsRejection::AudienceMismatch => "audience-mismatch",
        }
    }
}

impl fmt::Display for ClaimsRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn validate_claims(claims: &ClaimsSet, now: i64, policy: &ValidationPolicy) -> Result<(), ClaimsRejection> {
    let skew = policy.clock_skew_window as i64;
    if claims.iat > now + skew {
        return Err(ClaimsRejection::IatSkew);
    }
    if let Some(age) = policy.max_iat_age {
        if now - claims.iat > age as i64 {
            return Err(ClaimsRejection::IatSkew);
        }
    }
    if now > claims.exp + skew {
        return Err(ClaimsRejection::Expired);
    }
    if claims.exp - claims.iat > policy.max_lifetime as i64 {
        return Err(ClaimsRejection::LifetimeExceeded);
    }
    if let Some(required) = &policy.required_aud {
        if claims.aud.as_deref() != Some(required.as_str()) {
            return Err(ClaimsRejection::AudienceMismatch);
        }
    }
    Ok(())
}
