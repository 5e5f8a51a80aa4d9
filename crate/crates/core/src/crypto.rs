//! Concrete primitives: ECDSA over P-256 (deterministic nonces), AES-128-GMAC
//! with 96-bit tags, SHA-256 and HKDF-SHA256, plus a minimal certificate
//! issuer for pseudonym batches.

use std::fmt;

use aes_gcm::aead::consts::U12;
use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::aes::Aes128;
use aes_gcm::AesGcm;
use hkdf::Hkdf;
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature as P256Signature, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAC_KEY_LEN: usize = 16;
pub const MAC_TAG_LEN: usize = 12;
pub const IV_LEN: usize = 12;
pub const POINT_LEN: usize = 33;
pub const SIGNATURE_LEN: usize = 64;
pub const DIGEST_LEN: usize = 32;
/// pk_P (33) ‖ pk_V (33) ‖ start (8) ‖ end (8) ‖ signature (64).
pub const CERT_LEN: usize = POINT_LEN * 2 + 16 + SIGNATURE_LEN;

/// GCM with a 96-bit nonce and a 96-bit tag.
type Gmac128 = AesGcm<Aes128, U12, U12>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("{what} must be {expected} bytes, got {actual}")]
    InvalidLength {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid secret scalar")]
    InvalidSecret,
    #[error("pseudonym batch size must be at least 1")]
    EmptyBatch,
    #[error("certificate validity must satisfy start < end")]
    InvalidValidity,
    #[error("certificate signature does not verify")]
    BadCertificate,
}

fn check_len(what: &'static str, bytes: &[u8], expected: usize) -> Result<(), CryptoError> {
    if bytes.len() == expected {
        Ok(())
    } else {
        Err(CryptoError::InvalidLength {
            what,
            expected,
            actual: bytes.len(),
        })
    }
}

/// SHA-256 over the concatenation of `parts`.
pub fn sha256(parts: &[&[u8]]) -> [u8; DIGEST_LEN] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// First `N` bytes of a digest.
pub fn truncate<const N: usize>(digest: &[u8; DIGEST_LEN]) -> [u8; N] {
    let mut out = [0u8; N];
    out.copy_from_slice(&digest[..N]);
    out
}

/// HKDF-SHA256 (empty salt), output truncated to a 16-byte key.
pub fn hkdf(secret: &[u8], info: &[u8]) -> [u8; MAC_KEY_LEN] {
    let hk = Hkdf::<Sha256>::new(None, secret);
    let mut okm = [0u8; MAC_KEY_LEN];
    hk.expand(info, &mut okm)
        .expect("16 bytes is far below the HKDF-SHA256 output limit");
    okm
}

/// 96-bit GMAC tag.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MacTag(pub [u8; MAC_TAG_LEN]);

impl fmt::Debug for MacTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacTag({})", hex_str(&self.0))
    }
}

/// AES-128-GMAC: GCM authentication of `aad ‖ payload` with an empty
/// plaintext, tag truncated to 96 bits.
pub fn gmac(key: &[u8], iv: &[u8], aad: &[u8], payload: &[u8]) -> Result<MacTag, CryptoError> {
    check_len("MAC key", key, MAC_KEY_LEN)?;
    check_len("IV", iv, IV_LEN)?;
    let cipher = Gmac128::new_from_slice(key).expect("length checked above");
    let mut auth = Vec::with_capacity(aad.len() + payload.len());
    auth.extend_from_slice(aad);
    auth.extend_from_slice(payload);
    let tag = cipher
        .encrypt_in_place_detached(iv.into(), &auth, &mut [])
        .expect("empty plaintext never exceeds the GCM length limit");
    let mut out = [0u8; MAC_TAG_LEN];
    out.copy_from_slice(&tag);
    Ok(MacTag(out))
}

/// Compressed SEC1 encoding of a P-256 point.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; POINT_LEN]);

impl PublicKey {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        check_len("public key", bytes, POINT_LEN)?;
        let mut out = [0u8; POINT_LEN];
        out.copy_from_slice(bytes);
        Ok(PublicKey(out))
    }

    pub fn as_bytes(&self) -> &[u8; POINT_LEN] {
        &self.0
    }

    fn verifying_key(&self) -> Option<VerifyingKey> {
        VerifyingKey::from_sec1_bytes(&self.0).ok()
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex_str(&self.0))
    }
}

/// Fixed-width `r ‖ s` ECDSA signature.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        check_len("signature", bytes, SIGNATURE_LEN)?;
        let mut out = [0u8; SIGNATURE_LEN];
        out.copy_from_slice(bytes);
        Ok(Signature(out))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex_str(&self.0))
    }
}

/// A P-256 signing key together with its compressed public point.
#[derive(Clone)]
pub struct SigningKeyPair {
    secret: SigningKey,
    public: PublicKey,
}

impl SigningKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_signing_key(SigningKey::random(rng))
    }

    /// Deterministic key generation from a 64-bit seed.
    pub fn from_seed(seed: u64) -> Self {
        Self::generate(&mut ChaCha20Rng::seed_from_u64(seed))
    }

    /// Builds a key pair from a big-endian scalar in `[1, n-1]`.
    pub fn from_secret_bytes(secret: &[u8]) -> Result<Self, CryptoError> {
        check_len("secret scalar", secret, 32)?;
        SigningKey::from_slice(secret)
            .map(Self::from_signing_key)
            .map_err(|_| CryptoError::InvalidSecret)
    }

    fn from_signing_key(secret: SigningKey) -> Self {
        let point = secret.verifying_key().to_encoded_point(true);
        let public = PublicKey::from_slice(point.as_bytes()).expect("compressed P-256 point");
        SigningKeyPair { secret, public }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes().into()
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

/// ECDSA-P256/SHA-256 with RFC 6979 nonces.
pub fn sign(key: &SigningKeyPair, message: &[u8]) -> Signature {
    let sig: P256Signature = key.secret.sign(message);
    let mut out = [0u8; SIGNATURE_LEN];
    out.copy_from_slice(&sig.to_bytes());
    Signature(out)
}

pub fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Some(vk) = public.verifying_key() else {
        return false;
    };
    let Ok(sig) = P256Signature::from_slice(&signature.0) else {
        return false;
    };
    vk.verify(message, &sig).is_ok()
}

/// Certificate validity window in seconds since epoch 0, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Validity {
    pub start: u64,
    pub end: u64,
}

impl Validity {
    pub fn new(start: u64, end: u64) -> Result<Self, CryptoError> {
        if start < end {
            Ok(Validity { start, end })
        } else {
            Err(CryptoError::InvalidValidity)
        }
    }

    pub fn contains(&self, seconds: u64) -> bool {
        self.start <= seconds && seconds < self.end
    }
}

/// Flat TA-signed certificate binding a signing key and a VRF/tag key.
///
/// RSU certificates use the same layout with both keys set to the RSU key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PseudonymCert {
    pub pk_p: PublicKey,
    pub pk_v: PublicKey,
    pub validity: Validity,
    pub ta_signature: Signature,
}

impl PseudonymCert {
    /// `pk_P ‖ pk_V ‖ start ‖ end`, the bytes covered by the TA signature.
    pub fn signed_bytes(pk_p: &PublicKey, pk_v: &PublicKey, validity: &Validity) -> Vec<u8> {
        let mut out = Vec::with_capacity(POINT_LEN * 2 + 16);
        out.extend_from_slice(&pk_p.0);
        out.extend_from_slice(&pk_v.0);
        out.extend_from_slice(&validity.start.to_be_bytes());
        out.extend_from_slice(&validity.end.to_be_bytes());
        out
    }

    pub fn to_bytes(&self) -> [u8; CERT_LEN] {
        let mut out = [0u8; CERT_LEN];
        out[..POINT_LEN].copy_from_slice(&self.pk_p.0);
        out[POINT_LEN..2 * POINT_LEN].copy_from_slice(&self.pk_v.0);
        out[66..74].copy_from_slice(&self.validity.start.to_be_bytes());
        out[74..82].copy_from_slice(&self.validity.end.to_be_bytes());
        out[82..].copy_from_slice(&self.ta_signature.0);
        out
    }

    /// Parses the fixed layout. The signature is not checked here.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        check_len("certificate", bytes, CERT_LEN)?;
        let be64 = |b: &[u8]| u64::from_be_bytes(b.try_into().expect("8 bytes"));
        Ok(PseudonymCert {
            pk_p: PublicKey::from_slice(&bytes[..33])?,
            pk_v: PublicKey::from_slice(&bytes[33..66])?,
            validity: Validity {
                start: be64(&bytes[66..74]),
                end: be64(&bytes[74..82]),
            },
            ta_signature: Signature::from_slice(&bytes[82..])?,
        })
    }

    pub fn verify(&self, ta: &PublicKey) -> bool {
        self.validity.start < self.validity.end
            && verify(
                ta,
                &Self::signed_bytes(&self.pk_p, &self.pk_v, &self.validity),
                &self.ta_signature,
            )
    }

    /// SHA-256 of the encoded certificate.
    pub fn digest(&self) -> [u8; DIGEST_LEN] {
        sha256(&[&self.to_bytes()])
    }
}

/// One issued pseudonym: the certificate and both private keys.
#[derive(Debug, Clone)]
pub struct Pseudonym {
    pub cert: PseudonymCert,
    pub sk_p: SigningKeyPair,
    pub sk_v: SigningKeyPair,
}

/// In-process trusted authority. Holds the master key and signs certificates.
#[derive(Debug, Clone)]
pub struct TrustedAuthority {
    keys: SigningKeyPair,
}

impl TrustedAuthority {
    pub fn new(keys: SigningKeyPair) -> Self {
        TrustedAuthority { keys }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(SigningKeyPair::from_seed(seed))
    }

    pub fn public(&self) -> &PublicKey {
        self.keys.public()
    }

    pub fn keys(&self) -> &SigningKeyPair {
        &self.keys
    }

    pub fn certify(&self, pk_p: &PublicKey, pk_v: &PublicKey, validity: Validity) -> PseudonymCert {
        let ta_signature = sign(&self.keys, &PseudonymCert::signed_bytes(pk_p, pk_v, &validity));
        PseudonymCert {
            pk_p: *pk_p,
            pk_v: *pk_v,
            validity,
            ta_signature,
        }
    }

    pub fn issue_pseudonym_batch<R: RngCore + CryptoRng>(
        &self,
        count: usize,
        validity: Validity,
        rng: &mut R,
    ) -> Result<Vec<Pseudonym>, CryptoError> {
        issue_pseudonym_batch(count, &self.keys, validity, rng)
    }
}

/// Generates `count` fresh (sk_P, sk_V) pairs and has the TA certify each.
pub fn issue_pseudonym_batch<R: RngCore + CryptoRng>(
    count: usize,
    ta: &SigningKeyPair,
    validity: Validity,
    rng: &mut R,
) -> Result<Vec<Pseudonym>, CryptoError> {
    if count == 0 {
        return Err(CryptoError::EmptyBatch);
    }
    if validity.start >= validity.end {
        return Err(CryptoError::InvalidValidity);
    }
    let authority = TrustedAuthority::new(ta.clone());
    Ok((0..count)
        .map(|_| {
            let sk_p = SigningKeyPair::generate(rng);
            let sk_v = SigningKeyPair::generate(rng);
            let cert = authority.certify(sk_p.public(), sk_v.public(), validity);
            Pseudonym { cert, sk_p, sk_v }
        })
        .collect())
}

pub(crate) fn hex_str(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unhex(s: &str) -> Vec<u8> {
        hex::decode(s).unwrap()
    }

    // Reference values below come from tests/oracles/gen_vectors.py
    // (Python `cryptography` + hashlib).

    #[test]
    fn ecdsa_matches_reference_vector() {
        let key = SigningKeyPair::from_secret_bytes(&unhex(
            "c9afa9d845ba75166b5c215767b1d6934e50c3db36e89b127b8a622b120f6721",
        ))
        .unwrap();
        assert_eq!(
            key.public().0.to_vec(),
            unhex("0360fed4ba255a9d31c961eb74c6356d68c049b8923b61fa6ce669622e60f29fb6")
        );
        let sig = sign(&key, b"sample");
        let expected = [
            "efd48b2aacb6a8fd1140dd9cd45e81d69d2c877b56aaf991c34d0ea84eaf3716",
            "f7cb1c942d657c41d436c7a1b6e29f65f3e900dbb9aff4064dc4ab2f843acda8",
        ]
        .concat();
        assert_eq!(sig.0.to_vec(), unhex(&expected));
        assert!(verify(key.public(), b"sample", &sig));
    }

    #[test]
    fn sign_verify_round_trip_and_bit_flips() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for i in 0..1000 {
            let key = if i % 50 == 0 {
                SigningKeyPair::generate(&mut rng)
            } else {
                SigningKeyPair::from_seed(i / 50)
            };
            let len = rng.gen_range(1..64);
            let msg: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let sig = sign(&key, &msg);
            assert!(verify(key.public(), &msg, &sig));

            let mut m2 = msg.clone();
            let bit = rng.gen_range(0..m2.len() * 8);
            m2[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(key.public(), &m2, &sig));

            let mut s2 = sig;
            let bit = rng.gen_range(0..SIGNATURE_LEN * 8);
            s2.0[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(key.public(), &msg, &s2));

            let mut pk = *key.public();
            let bit = rng.gen_range(0..POINT_LEN * 8);
            pk.0[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&pk, &msg, &sig));
        }
    }

    #[test]
    fn gmac_matches_reference_vectors() {
        let tag = gmac(
            &(0u8..16).collect::<Vec<_>>(),
            &(100u8..112).collect::<Vec<_>>(),
            b"meta-bytes",
            b"basic safety message",
        )
        .unwrap();
        assert_eq!(tag.0.to_vec(), unhex("261a019fd36af89fccc26972"));

        // NIST GCM AAD-only vector: the 96-bit tag is the prefix of the full tag.
        let tag = gmac(
            &unhex("77be63708971c4e240d1cb79e8d77feb"),
            &unhex("e0e00f19fed7ba0136a797f3"),
            &unhex("7a43ec1d9c0a5a78a0b16533a6213cab"),
            &[],
        )
        .unwrap();
        assert_eq!(tag.0.to_vec(), unhex("209fcc8d3675ed938e9c7166"));
    }

    #[test]
    fn gmac_rejects_bad_lengths() {
        assert!(matches!(
            gmac(&[0; 15], &[0; 12], b"", b""),
            Err(CryptoError::InvalidLength { what: "MAC key", .. })
        ));
        assert!(matches!(
            gmac(&[0; 16], &[0; 16], b"", b""),
            Err(CryptoError::InvalidLength { what: "IV", .. })
        ));
    }

    #[test]
    fn gmac_is_deterministic_and_input_sensitive() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let key: [u8; 16] = rng.gen();
            let iv: [u8; 12] = rng.gen();
            let aad: [u8; 26] = rng.gen();
            let payload: Vec<u8> = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
            let tag = gmac(&key, &iv, &aad, &payload).unwrap();
            assert_eq!(tag, gmac(&key, &iv, &aad, &payload).unwrap());
            assert!(seen.insert(tag));

            let mutated = match rng.gen_range(0..4) {
                0 => {
                    let mut k = key;
                    k[rng.gen_range(0..16)] ^= 1 << rng.gen_range(0..8);
                    gmac(&k, &iv, &aad, &payload)
                }
                1 => {
                    let mut v = iv;
                    v[rng.gen_range(0..12)] ^= 1 << rng.gen_range(0..8);
                    gmac(&key, &v, &aad, &payload)
                }
                2 => {
                    let mut a = aad;
                    a[rng.gen_range(0..26)] ^= 1 << rng.gen_range(0..8);
                    gmac(&key, &iv, &a, &payload)
                }
                _ => {
                    let mut p = payload.clone();
                    p.push(rng.gen());
                    gmac(&key, &iv, &aad, &p)
                }
            }
            .unwrap();
            assert_ne!(tag, mutated);
        }
    }

    #[test]
    fn hkdf_matches_rfc5869_case_3() {
        assert_eq!(
            hkdf(&[0x0b; 22], b"").to_vec(),
            unhex("8da4e775a563c18f715f802a063c5a31")
        );
    }

    #[test]
    fn hkdf_separates_domains() {
        let secret = [9u8; 32];
        assert_eq!(hkdf(&secret, b"a"), hkdf(&secret, b"a"));
        assert_ne!(hkdf(&secret, b"a"), hkdf(&secret, b"b"));
        let outputs: std::collections::HashSet<_> = (0u32..10_000).map(|i| hkdf(&secret, &i.to_be_bytes())).collect();
        assert_eq!(outputs.len(), 10_000);
    }

    #[test]
    fn pseudonym_batch_certs_verify_and_are_distinct() {
        let ta = SigningKeyPair::from_seed(99);
        let validity = Validity::new(0, 86_400).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let batch = issue_pseudonym_batch(1000, &ta, validity, &mut rng).unwrap();
        assert_eq!(batch.len(), 1000);
        let distinct: std::collections::HashSet<_> = batch.iter().map(|p| p.cert.pk_p).collect();
        assert_eq!(distinct.len(), 1000);
        for p in &batch {
            assert!(p.cert.verify(ta.public()));
            assert_eq!(p.cert.pk_p, *p.sk_p.public());
            assert_eq!(p.cert.pk_v, *p.sk_v.public());
        }
    }

    #[test]
    fn single_cert_batch_and_tampering() {
        let ta = SigningKeyPair::from_seed(5);
        let validity = Validity::new(10, 20).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let batch = issue_pseudonym_batch(1, &ta, validity, &mut rng).unwrap();
        let cert = batch[0].cert;
        assert!(cert.verify(ta.public()));
        let bytes = cert.to_bytes();
        assert_eq!(PseudonymCert::from_bytes(&bytes).unwrap(), cert);
        for i in 0..CERT_LEN {
            let mut tampered = bytes;
            tampered[i] ^= 0x01;
            let ok = PseudonymCert::from_bytes(&tampered)
                .map(|c| c.verify(ta.public()))
                .unwrap_or(false);
            assert!(!ok, "tampered byte {i} still verifies");
        }
    }

    #[test]
    fn batch_preconditions() {
        let ta = SigningKeyPair::from_seed(5);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let validity = Validity::new(0, 1).unwrap();
        assert_eq!(
            issue_pseudonym_batch(0, &ta, validity, &mut rng).unwrap_err(),
            CryptoError::EmptyBatch
        );
        assert_eq!(Validity::new(5, 5).unwrap_err(), CryptoError::InvalidValidity);
    }
}
