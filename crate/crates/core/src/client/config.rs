//! Client configuration file.
//!
//! ```toml
//! broker = "127.0.0.1:8883"
//! client_id = "dev-1"
//! scheme = "jwt"                  # anonymous | username-password | mutual-tls | jwt
//! secure = true
//! trusted_roots = ["root.cert"]
//! keep_alive = 60
//! skew = 0                        # device clock offset, seconds
//! reconnect_backoff = 5
//! subscriptions = ["devices/+/telemetry"]
//! publish_topic = "devices/dev-1/telemetry"
//! publish_interval = 10
//!
//! # username-password
//! username = "dev-1"
//! password = "s3cret"
//! # mutual-tls: chain and key; jwt: key, key_alg, kid, audience, ...
//! chain = "dev-1.chain"
//! key = "dev-1.key"
//! key_alg = "ES256"
//! kid = "k1"
//! audience = "telemetry"
//! token_lifetime = 3600
//! refresh_margin = 300
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use super::{ClientConfig, ClientConfigError, ClockSource, JwtSettings, PublishPlan, Scheme};
use crate::channel::Credentials;
use crate::jws::{Algorithm, JwsError, SigningKey};
use crate::pki::{chain_from_text, PkiError};

#[derive(Debug, Error)]
pub enum ClientFileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("missing field {0:?} for this scheme")]
    Missing(&'static str),
    #[error("key: {0}")]
    Key(#[from] JwsError),
    #[error("certificates: {0}")]
    Pki(#[from] PkiError),
    #[error("{0}")]
    Config(#[from] ClientConfigError),
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    Anonymous,
    UsernamePassword,
    MutualTls,
    Jwt,
}

fn yes() -> bool {
    true
}
fn sixty() -> u16 {
    60
}
fn five() -> u64 {
    5
}
fn es256() -> Algorithm {
    Algorithm::Es256
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientFile {
    pub broker: String,
    pub client_id: String,
    pub scheme: SchemeName,
    #[serde(default = "yes")]
    pub secure: bool,
    #[serde(default)]
    pub trusted_roots: Vec<PathBuf>,
    #[serde(default = "sixty")]
    pub keep_alive: u16,
    #[serde(default)]
    pub skew: i64,
    #[serde(default = "five")]
    pub reconnect_backoff: u64,
    pub max_retries: Option<u32>,
    #[serde(default)]
    pub subscriptions: Vec<String>,
    pub publish_topic: Option<String>,
    pub publish_interval: Option<u64>,
    pub username: Option<String>,
    pub password: Option<String>,
    pub chain: Option<PathBuf>,
    pub key: Option<PathBuf>,
    #[serde(default = "es256")]
    pub key_alg: Algorithm,
    pub kid: Option<String>,
    pub audience: Option<String>,
    pub token_lifetime: Option<u64>,
    pub refresh_margin: Option<u64>,
}

fn read(path: &Path) -> Result<String, ClientFileError> {
    fs::read_to_string(path).map_err(|source| ClientFileError::Io {
        path: path.to_owned(),
        source,
    })
}

impl ClientFile {
    pub fn parse(text: &str) -> Result<Self, ClientFileError> {
        Ok(toml::from_str(text)?)
    }

    /// Resolves relative paths against `base` and loads key material.
    pub fn build(&self, base: &Path) -> Result<(ClientConfig, ClockSource), ClientFileError> {
        let key = || -> Result<SigningKey, ClientFileError> {
            let path = base.join(self.key.as_ref().ok_or(ClientFileError::Missing("key"))?);
            Ok(SigningKey::from_pem(self.key_alg, &read(&path)?)?)
        };
        let scheme = match self.scheme {
            SchemeName::Anonymous => Scheme::Anonymous,
            SchemeName::UsernamePassword => Scheme::UsernamePassword {
                username: self.username.clone().ok_or(ClientFileError::Missing("username"))?,
                password: self.password.clone().ok_or(ClientFileError::Missing("password"))?,
            },
            SchemeName::MutualTls => {
                let chain_path = base.join(self.chain.as_ref().ok_or(ClientFileError::Missing("chain"))?);
                Scheme::MutualTls(Credentials {
                    chain: chain_from_text(&read(&chain_path)?)?,
                    key: key()?,
                })
            }
            SchemeName::Jwt => {
                let mut s = JwtSettings::new(
                    key()?,
                    self.audience.clone().ok_or(ClientFileError::Missing("audience"))?,
                );
                s.kid = self.kid.clone();
                if let Some(l) = self.token_lifetime {
                    s.token_lifetime = l;
                }
                if let Some(m) = self.refresh_margin {
                    s.refresh_margin = m;
                }
                Scheme::Jwt(s)
            }
        };
        let roots = self
            .trusted_roots
            .iter()
            .map(|p| Ok(chain_from_text(&read(&base.join(p))?)?.leaf().clone()))
            .collect::<Result<Vec<_>, ClientFileError>>()?;
        let mut cfg = ClientConfig::new(self.client_id.clone(), scheme, roots);
        cfg.secure = self.secure;
        cfg.keep_alive = self.keep_alive;
        cfg.reconnect_backoff = self.reconnect_backoff;
        cfg.max_retries = self.max_retries;
        cfg.subscriptions = self.subscriptions.clone();
        cfg.publish = match (&self.publish_topic, self.publish_interval) {
            (Some(topic), Some(interval)) => Some(PublishPlan {
                topic: topic.clone(),
                interval,
            }),
            _ => None,
        };
        cfg.validate()?;
        Ok((cfg, ClockSource::new(self.skew)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn username_password_needs_credentials() {
        let f =
            ClientFile::parse("broker = \"x:1\"\nclient_id = \"c\"\nscheme = \"username-password\"\nsecure = false")
                .unwrap();
        assert!(matches!(
            f.build(Path::new(".")),
            Err(ClientFileError::Missing("username"))
        ));
        let f = ClientFile::parse(
            "broker = \"x:1\"\nclient_id = \"c\"\nscheme = \"username-password\"\nsecure = false\nusername = \"u\"\npassword = \"p\"",
        )
        .unwrap();
        let (cfg, clock) = f.build(Path::new(".")).unwrap();
        assert_eq!(cfg.scheme.name(), "username-password");
        assert_eq!(clock.skew_offset, 0);
    }
}
