//! Listener configuration file.
//!
//! ```toml
//! mode = "jwt"                    # username-password | mutual-tls | jwt | allow-anonymous
//! port = 8883                     # optional; 8883 with [tls], 1883 without
//! default_policy = "deny-all"     # or "legacy-open"
//!
//! [jwt]
//! clock_skew_window = 600
//! max_lifetime = 3600
//! audience = "telemetry"
//!
//! [tls]
//! chain = "broker.chain"          # certificate chain text, leaf first
//! key = "broker.key"              # PKCS#8 PEM
//! key_alg = "ES256"
//! client_roots = ["root.cert"]
//!
//! [[identity]]
//! name = "device-7"
//! password = "s3cret"             # hashed on load
//! cert_subjects = ["device-7"]
//! publish_allow = ["sensors/device-7/#"]
//! subscribe_allow = ["commands/device-7/#"]
//! keys = [{ kid = "k1", alg = "ES256", path = "device-7.pub" }]
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{CryptoRng, RngCore};
use serde::Deserialize;
use thiserror::Error;

use super::{
    broker_jwt_policy, AclPolicy, AuthMode, AuthSchemeConfig, DefaultPolicy, IamError, IamStore, IdentityRecord,
    PasswordHash,
};
use crate::channel::{Credentials, ServerChannelConfig};
use crate::jws::{Algorithm, JwsError, SigningKey, ValidationPolicy, VerificationKey};
use crate::pki::{chain_from_text, Certificate, PkiError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("identity store: {0}")]
    Iam(#[from] IamError),
    #[error("key file {path}: {source}")]
    Key { path: PathBuf, source: JwsError },
    #[error("certificate file {path}: {source}")]
    Cert { path: PathBuf, source: PkiError },
    #[error("{0}")]
    Invalid(String),
}

fn default_skew() -> u64 {
    600
}

fn default_lifetime() -> u64 {
    3600
}

fn default_alg() -> Algorithm {
    Algorithm::Es256
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JwtSection {
    #[serde(default = "default_skew")]
    pub clock_skew_window: u64,
    #[serde(default = "default_lifetime")]
    pub max_lifetime: u64,
    pub audience: Option<String>,
}

impl Default for JwtSection {
    fn default() -> Self {
        JwtSection {
            clock_skew_window: default_skew(),
            max_lifetime: default_lifetime(),
            audience: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlsSection {
    pub chain: PathBuf,
    pub key: PathBuf,
    #[serde(default = "default_alg")]
    pub key_alg: Algorithm,
    #[serde(default)]
    pub client_roots: Vec<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySpec {
    pub kid: String,
    #[serde(default = "default_alg")]
    pub alg: Algorithm,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySpec {
    pub name: String,
    pub password: Option<String>,
    #[serde(default)]
    pub cert_subjects: Vec<String>,
    #[serde(default)]
    pub keys: Vec<KeySpec>,
    #[serde(flatten)]
    pub acl: AclPolicy,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListenerConfig {
    pub mode: AuthMode,
    pub port: Option<u16>,
    #[serde(default)]
    pub default_policy: DefaultPolicy,
    #[serde(default)]
    pub jwt: JwtSection,
    pub tls: Option<TlsSection>,
    #[serde(default, rename = "identity")]
    pub identities: Vec<IdentitySpec>,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })
}

impl ListenerConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ListenerConfig = toml::from_str(text)?;
        if cfg.mode == AuthMode::MutualTls && cfg.tls.as_ref().is_none_or(|t| t.client_roots.is_empty()) {
            return Err(ConfigError::Invalid("mutual-tls needs [tls] with client_roots".into()));
        }
        if cfg.default_policy == DefaultPolicy::LegacyOpen && cfg.mode != AuthMode::AllowAnonymous {
            return Err(ConfigError::Invalid(
                "legacy-open only applies to allow-anonymous".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn port(&self) -> u16 {
        self.port.unwrap_or(if self.tls.is_some() { 8883 } else { 1883 })
    }

    pub fn scheme(&self) -> AuthSchemeConfig {
        AuthSchemeConfig {
            mode: self.mode,
            jwt_policy: broker_jwt_policy(ValidationPolicy {
                clock_skew_window: self.jwt.clock_skew_window,
                max_lifetime: self.jwt.max_lifetime,
                required_aud: self.jwt.audience.clone(),
                max_iat_age: None,
            }),
            default_policy: self.default_policy,
        }
    }

    pub fn build_iam<R: RngCore + CryptoRng>(&self, base: &Path, rng: &mut R) -> Result<IamStore, ConfigError> {
        let mut iam = IamStore::new();
        for spec in &self.identities {
            let mut record = IdentityRecord {
                password: spec.password.as_ref().map(|p| PasswordHash::new(p.as_bytes(), rng)),
                cert_subjects: spec.cert_subjects.clone(),
                acl: spec.acl.clone(),
                ..Default::default()
            };
            for k in &spec.keys {
                let path = base.join(&k.path);
                let key = VerificationKey::from_pem(k.alg, &read(&path)?)
                    .map_err(|source| ConfigError::Key { path, source })?;
                record.verification_keys.push_back(key.with_key_id(k.kid.clone()));
            }
            iam.register_identity(&spec.name, record)?;
        }
        Ok(iam)
    }

    /// The server side of the secure channel, if the listener has one.
    pub fn server_channel(&self, base: &Path) -> Result<Option<ServerChannelConfig>, ConfigError> {
        let Some(tls) = &self.tls else { return Ok(None) };
        let chain_path = base.join(&tls.chain);
        let chain = chain_from_text(&read(&chain_path)?).map_err(|source| ConfigError::Cert {
            path: chain_path,
            source,
        })?;
        let key_path = base.join(&tls.key);
        let key = SigningKey::from_pem(tls.key_alg, &read(&key_path)?)
            .map_err(|source| ConfigError::Key { path: key_path, source })?;
        let client_roots = tls
            .client_roots
            .iter()
            .map(|p| load_certificate(&base.join(p)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Some(ServerChannelConfig {
            credentials: Credentials { chain, key },
            require_client_cert: self.mode == AuthMode::MutualTls,
            client_roots,
        }))
    }
}

/// Reads a single certificate stored in chain text form.
pub fn load_certificate(path: &Path) -> Result<Certificate, ConfigError> {
    let chain = chain_from_text(&read(path)?).map_err(|source| ConfigError::Cert {
        path: path.to_owned(),
        source,
    })?;
    Ok(chain.leaf().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_example() {
        let text = r#"
mode = "username-password"
[[identity]]
name = "alice"
password = "pw"
publish_allow = ["a/#"]
"#;
        let cfg = ListenerConfig::parse(text).unwrap();
        assert_eq!(cfg.port(), 1883);
        assert_eq!(cfg.scheme().jwt_policy.max_iat_age, Some(600));
        let mut rng = rand::rngs::OsRng;
        let iam = cfg.build_iam(Path::new("."), &mut rng).unwrap();
        assert!(iam.get("alice").unwrap().password.as_ref().unwrap().matches(b"pw"));
        assert_eq!(iam.get("alice").unwrap().acl.publish_allow, vec!["a/#".to_string()]);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        assert!(ListenerConfig::parse("mode = \"mutual-tls\"").is_err());
        assert!(ListenerConfig::parse("mode = \"jwt\"\ndefault_policy = \"legacy-open\"").is_err());
        assert!(ListenerConfig::parse("mode = \"telepathy\"").is_err());
        assert!(ListenerConfig::parse("mode = \"jwt\"\nbogus = 1").is_err());
    }
}
