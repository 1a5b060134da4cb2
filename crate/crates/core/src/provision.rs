//! Writes a self-consistent set of demo keys, certificates and config files
//! for running the TCP listener and clients by hand.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::broker::AuthMode;
use crate::jws::{JwsError, SigningKey};
use crate::pki::{chain_to_text, issue, self_sign, CertChain, PkiError, Validity};

#[derive(Debug, Error)]
pub enum ProvisionError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("key: {0}")]
    Key(#[from] JwsError),
    #[error("certificates: {0}")]
    Pki(#[from] PkiError),
    #[error("{0}")]
    Invalid(String),
}

pub const AUDIENCE: &str = "telemetry";

/// Writes `root.cert`, `broker.chain`, `broker.key`, `listener.toml` and one
/// `client-<id>.toml` (plus key material) per device. Returns the files written.
pub fn provision_demo<R: RngCore + CryptoRng>(
    dir: &Path,
    mode: AuthMode,
    devices: usize,
    port: u16,
    now: u64,
    rng: &mut R,
) -> Result<Vec<PathBuf>, ProvisionError> {
    if mode == AuthMode::AllowAnonymous {
        return Err(ProvisionError::Invalid(
            "nothing to provision for allow-anonymous".into(),
        ));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, contents: String| -> Result<(), ProvisionError> {
        let path = dir.join(name);
        fs::write(&path, contents)?;
        written.push(path);
        Ok(())
    };
    let validity = Validity::new(now.saturating_sub(86_400), now + 365 * 86_400)?;
    let root_key = SigningKey::generate_es256(rng);
    let root = self_sign("authbench-root", &root_key, validity)?;
    put("root.cert", chain_to_text(&CertChain::new(vec![root.clone()])?))?;
    let broker_key = SigningKey::generate_es256(rng);
    let broker_cert = issue(
        &root,
        &root_key,
        "broker.authbench",
        &broker_key.verification_key(),
        validity,
    )?;
    put("broker.chain", chain_to_text(&CertChain::new(vec![broker_cert])?))?;
    put("broker.key", broker_key.to_pem()?)?;

    let mut listener = format!(
        "mode = \"{mode}\"\nport = {port}\n\n[jwt]\nclock_skew_window = 600\nmax_lifetime = 3600\naudience = \"{AUDIENCE}\"\n\n\
         [tls]\nchain = \"broker.chain\"\nkey = \"broker.key\"\nclient_roots = [\"root.cert\"]\n"
    );
    for i in 1..=devices {
        let id = format!("dev-{i}");
        let mut identity = format!(
            "\n[[identity]]\nname = \"{id}\"\npublish_allow = [\"devices/{id}/#\"]\nsubscribe_allow = [\"devices/+/telemetry\"]\n"
        );
        let mut client = format!(
            "broker = \"127.0.0.1:{port}\"\nclient_id = \"{id}\"\nscheme = \"{mode}\"\ntrusted_roots = [\"root.cert\"]\n\
             keep_alive = 60\nsubscriptions = [\"devices/+/telemetry\"]\npublish_topic = \"devices/{id}/telemetry\"\npublish_interval = 10\n"
        );
        match mode {
            AuthMode::UsernamePassword => {
                let mut raw = [0u8; 12];
                rng.fill_bytes(&mut raw);
                let pw: String = raw.iter().map(|b| format!("{b:02x}")).collect();
                identity += &format!("password = \"{pw}\"\n");
                client += &format!("username = \"{id}\"\npassword = \"{pw}\"\n");
            }
            AuthMode::MutualTls => {
                let key = SigningKey::generate_es256(rng);
                let cert = issue(&root, &root_key, &id, &key.verification_key(), validity)?;
                put(&format!("{id}.chain"), chain_to_text(&CertChain::new(vec![cert])?))?;
                put(&format!("{id}.key"), key.to_pem()?)?;
                identity += &format!("cert_subjects = [\"{id}\"]\n");
                client += &format!("chain = \"{id}.chain\"\nkey = \"{id}.key\"\n");
            }
            AuthMode::Jwt => {
                let key = SigningKey::generate_es256(rng);
                put(&format!("{id}.key"), key.to_pem()?)?;
                put(&format!("{id}.pub"), key.verification_key().to_pem()?)?;
                identity += &format!("keys = [{{ kid = \"k1\", alg = \"ES256\", path = \"{id}.pub\" }}]\n");
                client += &format!("key = \"{id}.key\"\nkid = \"k1\"\naudience = \"{AUDIENCE}\"\n");
            }
            AuthMode::AllowAnonymous => unreachable!(),
        }
        listener += &identity;
        put(&format!("client-{id}.toml"), client)?;
    }
    put("listener.toml", listener)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::config::ListenerConfig;
    use crate::client::config::ClientFile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn provisioned_files_load() {
        for mode in [AuthMode::UsernamePassword, AuthMode::MutualTls, AuthMode::Jwt] {
            let dir = tempfile::tempdir().unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            provision_demo(dir.path(), mode, 2, 18883, 1_700_000_000, &mut rng).unwrap();
            let listener =
                ListenerConfig::parse(&fs::read_to_string(dir.path().join("listener.toml")).unwrap()).unwrap();
            assert_eq!(listener.mode, mode);
            let iam = listener.build_iam(dir.path(), &mut rng).unwrap();
            assert_eq!(iam.len(), 2);
            assert!(listener.server_channel(dir.path()).unwrap().is_some());
            let client = ClientFile::parse(&fs::read_to_string(dir.path().join("client-dev-2.toml")).unwrap()).unwrap();
            let (cfg, _) = client.build(dir.path()).unwrap();
            assert_eq!(cfg.client_id, "dev-2");
        }
    }
}
