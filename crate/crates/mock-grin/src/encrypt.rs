//! Deterministic symmetric OpenPGP encryption for fixture packages. Seeded
//! RNG makes the ciphertext reproducible; the output is standard enough
//! that stock gpg decrypts it.

use pgp::composed::MessageBuilder;
use pgp::crypto::hash::HashAlgorithm;
use pgp::crypto::sym::SymmetricKeyAlgorithm;
use pgp::types::StringToKey;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn encrypt_symmetric(plaintext: &[u8], passphrase: &str, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut msg = MessageBuilder::from_bytes("", plaintext.to_vec())
        .seipd_v1(&mut rng, SymmetricKeyAlgorithm::AES256);
    msg.encrypt_with_password(
        StringToKey::new_iterated(&mut rng, HashAlgorithm::Sha256, 96),
        &passphrase.into(),
    )
    .unwrap();
    msg.to_vec(&mut rng).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use std::process::{Command, Stdio};

    #[test]
    fn gpg_can_decrypt_and_output_is_deterministic() {
        let data = b"hello grin package bytes".to_vec();
        let a = encrypt_symmetric(&data, "test-passphrase", 7);
        let b = encrypt_symmetric(&data, "test-passphrase", 7);
        assert_eq!(a, b, "same seed must give identical ciphertext");
        let c = encrypt_symmetric(&data, "test-passphrase", 8);
        assert_ne!(a, c);

        let dir = tempfile::tempdir().unwrap();
        let enc_path = dir.path().join("pkg.gpg");
        let out_path = dir.path().join("pkg.out");
        std::fs::write(&enc_path, &a).unwrap();

        let mut child = Command::new("gpg")
            .args([
                "--batch",
                "--yes",
                "--quiet",
                "--pinentry-mode",
                "loopback",
                "--passphrase-fd",
                "0",
                "--decrypt",
                "--output",
            ])
            .arg(&out_path)
            .arg(&enc_path)
            .stdin(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child
            .stdin
            .as_mut()
            .unwrap()
            .write_all(b"test-passphrase\n")
            .unwrap();
        let out = child.wait_with_output().unwrap();
        assert!(
            out.status.success(),
            "gpg failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(std::fs::read(&out_path).unwrap(), data);
    }
}
