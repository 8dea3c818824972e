//! Pseudonym data model, PCA-side issuance and revocation over a pluggable
//! signature scheme, canonical element encoding, and the fake-pseudonym
//! list (FPL).
//!
//! The signature scheme is abstract because only its verification cost
//! enters the performance models. The deterministic mock scheme is the test
//! default; an ECDSA P-256 binding is provided for running against real
//! signatures.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use ring::signature::{EcdsaKeyPair, KeyPair as _, UnparsedPublicKey};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::filter::{
    BloomFilter, Coverage, CountingBloomFilter, ElementKey, FilterError, FilterParams,
};
use crate::wire::{self, Reader, WireError};

pub const FPL_MAGIC: &str = "PFL1";

/// Default ECDSA-256 verification delay assumed by the analytic models, in
/// seconds.
pub const DEFAULT_VERIFY_COST_S: f64 = 0.004;

pub const MOCK_SCHEME_ID: u8 = 1;
pub const ECDSA_P256_SCHEME_ID: u8 = 2;

#[derive(Debug, Error)]
pub enum CredentialError {
    #[error("pseudonym lifetime is empty or inverted")]
    EmptyLifetime,
    #[error("unknown pseudonym")]
    UnknownPseudonym,
    #[error("pseudonym already revoked")]
    AlreadyRevoked,
    #[error("requested window is outside the registry coverage period")]
    WindowOutsideCoverage,
    #[error("invalid pseudonym encoding: {0}")]
    InvalidEncoding(&'static str),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Codec(#[from] WireError),
}

/// Half-open validity window `[not_before, not_after)` in seconds since
/// epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lifetime {
    pub not_before: u64,
    pub not_after: u64,
}

impl Lifetime {
    pub fn new(not_before: u64, not_after: u64) -> Result<Self, CredentialError> {
        if not_before >= not_after {
            return Err(CredentialError::EmptyLifetime);
        }
        Ok(Lifetime { not_before, not_after })
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.not_before as f64 && t < self.not_after as f64
    }

    pub fn duration(&self) -> u64 {
        self.not_after - self.not_before
    }
}

/// Governs how a pseudonym maps to a filter element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LifetimeMode {
    /// All of a vehicle's pseudonyms share the full window; the element is
    /// the public key alone.
    Overlapping,
    /// Pseudonyms tile the window back to back; the element is the public
    /// key combined with its lifetime.
    NonOverlapping,
}

/// A short-lived anonymized credential: a public key bound to a validity
/// window and signed by the issuing PCA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pseudonym {
    pub scheme_id: u8,
    pub public_key: Vec<u8>,
    pub lifetime: Lifetime,
    pub issuer_id: String,
    pub signature: Vec<u8>,
}

impl Pseudonym {
    /// The byte string the issuer signs: public key, window bounds, issuer.
    pub fn signed_message(&self) -> Vec<u8> {
        let mut msg = Vec::with_capacity(self.public_key.len() + 16 + self.issuer_id.len());
        msg.extend_from_slice(&self.public_key);
        wire::put_u64(&mut msg, self.lifetime.not_before);
        wire::put_u64(&mut msg, self.lifetime.not_after);
        msg.extend_from_slice(self.issuer_id.as_bytes());
        msg
    }

    /// Canonical filter element for this pseudonym.
    pub fn element_key(&self, mode: LifetimeMode) -> ElementKey {
        element_key(&self.public_key, &self.lifetime, mode)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(self.scheme_id);
        wire::put_u16(&mut out, self.public_key.len() as u16);
        out.extend_from_slice(&self.public_key);
        wire::put_u64(&mut out, self.lifetime.not_before);
        wire::put_u64(&mut out, self.lifetime.not_after);
        out.push(self.issuer_id.len() as u8);
        out.extend_from_slice(self.issuer_id.as_bytes());
        wire::put_u16(&mut out, self.signature.len() as u16);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CredentialError> {
        let mut r = Reader::new(buf);
        let p = Self::read(&mut r)?;
        if r.remaining() != 0 {
            return Err(WireError::TrailingBytes.into());
        }
        Ok(p)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, CredentialError> {
        let scheme_id = r.u8()?;
        let pk_len = r.u16()? as usize;
        let public_key = r.bytes(pk_len)?.to_vec();
        if public_key.is_empty() {
            return Err(CredentialError::InvalidEncoding("empty public key"));
        }
        let lifetime = Lifetime::new(r.u64()?, r.u64()?)?;
        let id_len = r.u8()? as usize;
        let issuer_id = std::str::from_utf8(r.bytes(id_len)?)
            .map_err(|_| CredentialError::InvalidEncoding("issuer id is not UTF-8"))?
            .to_owned();
        let sig_len = r.u16()? as usize;
        let signature = r.bytes(sig_len)?.to_vec();
        Ok(Pseudonym { scheme_id, public_key, lifetime, issuer_id, signature })
    }
}

/// Derives the canonical element key for a public key and lifetime.
pub fn element_key(public_key: &[u8], lifetime: &Lifetime, mode: LifetimeMode) -> ElementKey {
    let bytes = match mode {
        LifetimeMode::Overlapping => public_key.to_vec(),
        LifetimeMode::NonOverlapping => {
            let mut b = Vec::with_capacity(public_key.len() + 16);
            b.extend_from_slice(public_key);
            wire::put_u64(&mut b, lifetime.not_before);
            wire::put_u64(&mut b, lifetime.not_after);
            b
        }
    };
    ElementKey::new(bytes).expect("public keys are non-empty")
}

#[derive(Debug, Clone)]
pub struct SchemeKeyPair {
    pub secret: Vec<u8>,
    pub public: Vec<u8>,
}

/// Signature scheme used for pseudonyms and list signing.
///
/// Verification cost is declared, not measured: the models treat one
/// verification as a fixed delay.
pub trait SignatureScheme: Send + Sync {
    fn scheme_id(&self) -> u8;
    fn name(&self) -> &'static str;
    fn keygen(&self) -> SchemeKeyPair;
    fn sign(&self, secret: &[u8], message: &[u8]) -> Vec<u8>;
    fn verify(&self, public: &[u8], message: &[u8], signature: &[u8]) -> bool;
    fn verification_cost_s(&self) -> f64 {
        DEFAULT_VERIFY_COST_S
    }
}

/// Deterministic digest-based scheme for tests and simulation.
///
/// The "signature" is a tag over the public key and message, so any
/// tampered byte fails verification, while signing and verifying cost
/// microseconds and key generation replays from a seed.
pub struct MockScheme {
    rng: Mutex<ChaCha12Rng>,
}

const MOCK_PK_TAG: &[u8] = b"psnym-mock-pk";
const MOCK_SIG_TAG: &[u8] = b"psnym-mock-sig";

impl MockScheme {
    pub fn seeded(seed: u64) -> Self {
        MockScheme { rng: Mutex::new(ChaCha12Rng::seed_from_u64(seed)) }
    }

    fn derive_public(secret: &[u8]) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(MOCK_PK_TAG);
        h.update(secret);
        h.finalize().to_vec()
    }

    fn tag(public: &[u8], message: &[u8]) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(MOCK_SIG_TAG);
        h.update((public.len() as u64).to_be_bytes());
        h.update(public);
        h.update(message);
        h.finalize().to_vec()
    }
}

impl SignatureScheme for MockScheme {
    fn scheme_id(&self) -> u8 {
        MOCK_SCHEME_ID
    }

    fn name(&self) -> &'static str {
        "mock"
    }

    fn keygen(&self) -> SchemeKeyPair {
        let mut secret = vec![0u8; 32];
        self.rng.lock().expect("mock rng poisoned").fill_bytes(&mut secret);
        let public = Self::derive_public(&secret);
        SchemeKeyPair { secret, public }
    }

    fn sign(&self, secret: &[u8], message: &[u8]) -> Vec<u8> {
        Self::tag(&Self::derive_public(secret), message)
    }

    fn verify(&self, public: &[u8], message: &[u8], signature: &[u8]) -> bool {
        Self::tag(public, message) == signature
    }
}

/// ECDSA P-256 with SHA-256, fixed-length signatures.
pub struct EcdsaP256Scheme {
    rng: ring::rand::SystemRandom,
}

impl EcdsaP256Scheme {
    pub fn new() -> Self {
        EcdsaP256Scheme { rng: ring::rand::SystemRandom::new() }
    }
}

impl Default for EcdsaP256Scheme {
    fn default() -> Self {
        Self::new()
    }
}

impl SignatureScheme for EcdsaP256Scheme {
    fn scheme_id(&self) -> u8 {
        ECDSA_P256_SCHEME_ID
    }

    fn name(&self) -> &'static str {
        "ecdsa-p256"
    }

    fn keygen(&self) -> SchemeKeyPair {
        let alg = &ring::signature::ECDSA_P256_SHA256_FIXED_SIGNING;
        let pkcs8 = EcdsaKeyPair::generate_pkcs8(alg, &self.rng).expect("P-256 keygen failed");
        let pair = EcdsaKeyPair::from_pkcs8(alg, pkcs8.as_ref(), &self.rng)
            .expect("fresh PKCS#8 key must parse");
        SchemeKeyPair {
            secret: pkcs8.as_ref().to_vec(),
            public: pair.public_key().as_ref().to_vec(),
        }
    }

    fn sign(&self, secret: &[u8], message: &[u8]) -> Vec<u8> {
        let alg = &ring::signature::ECDSA_P256_SHA256_FIXED_SIGNING;
        let pair = EcdsaKeyPair::from_pkcs8(alg, secret, &self.rng).expect("invalid signing key");
        pair.sign(&self.rng, message).expect("P-256 signing failed").as_ref().to_vec()
    }

    fn verify(&self, public: &[u8], message: &[u8], signature: &[u8]) -> bool {
        UnparsedPublicKey::new(&ring::signature::ECDSA_P256_SHA256_FIXED, public)
            .verify(message, signature)
            .is_ok()
    }
}

/// Exact list of element-key digests that passed filter tests but failed
/// signature cross-verification.
///
/// Membership is exact: the list stores 32-byte digests, never filter bits,
/// so it has no false positives. Distribution uses full-list replacement.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FakePseudonymList {
    digests: BTreeSet<[u8; 32]>,
    version: u64,
    scheme_id: u8,
    signature: Vec<u8>,
}

impl FakePseudonymList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.digests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }

    pub fn contains(&self, key: &ElementKey) -> bool {
        self.digests.contains(&key.digest())
    }

    /// Inserts a key digest without signing; used for receiver-local
    /// additions after a failed cross-verification. Returns false if the
    /// key was already listed.
    pub fn add_local(&mut self, key: &ElementKey) -> bool {
        let inserted = self.digests.insert(key.digest());
        if inserted {
            self.version += 1;
            self.signature.clear();
            self.scheme_id = 0;
        }
        inserted
    }

    /// Inserts a key digest and re-signs the list with the issuer key.
    pub fn add_signed(
        &mut self,
        key: &ElementKey,
        scheme: &dyn SignatureScheme,
        issuer_secret: &[u8],
    ) -> bool {
        let inserted = self.digests.insert(key.digest());
        if inserted {
            self.version += 1;
            self.sign(scheme, issuer_secret);
        }
        inserted
    }

    pub fn sign(&mut self, scheme: &dyn SignatureScheme, issuer_secret: &[u8]) {
        self.scheme_id = scheme.scheme_id();
        let body = self.signed_body();
        self.signature = scheme.sign(issuer_secret, &body);
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme, issuer_public: &[u8]) -> bool {
        self.scheme_id == scheme.scheme_id()
            && scheme.verify(issuer_public, &self.signed_body(), &self.signature)
    }

    fn signed_body(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 32 * self.digests.len());
        out.extend_from_slice(FPL_MAGIC.as_bytes());
        wire::put_u64(&mut out, self.version);
        wire::put_u32(&mut out, self.digests.len() as u32);
        for d in &self.digests {
            out.extend_from_slice(d);
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.signed_body();
        out.push(self.scheme_id);
        wire::put_u16(&mut out, self.signature.len() as u16);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CredentialError> {
        let mut r = Reader::new(buf);
        r.magic(FPL_MAGIC)?;
        let version = r.u64()?;
        let count = r.u32()? as usize;
        let mut digests = BTreeSet::new();
        for _ in 0..count {
            let d: [u8; 32] = r.bytes(32)?.try_into().unwrap();
            digests.insert(d);
        }
        if digests.len() != count {
            return Err(CredentialError::InvalidEncoding("duplicate list entries"));
        }
        let scheme_id = r.u8()?;
        let sig_len = r.u16()? as usize;
        let signature = r.bytes(sig_len)?.to_vec();
        if r.remaining() != 0 {
            return Err(WireError::TrailingBytes.into());
        }
        Ok(FakePseudonymList { digests, version, scheme_id, signature })
    }
}

/// Verification half of the issuer identity, shared with validators.
#[derive(Clone)]
pub struct IssuerVerifier {
    pub scheme: Arc<dyn SignatureScheme>,
    pub public_key: Vec<u8>,
}

impl IssuerVerifier {
    pub fn verify_pseudonym(&self, p: &Pseudonym) -> bool {
        p.scheme_id == self.scheme.scheme_id()
            && self.scheme.verify(&self.public_key, &p.signed_message(), &p.signature)
    }
}

impl fmt::Debug for IssuerVerifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IssuerVerifier").field("scheme", &self.scheme.name()).finish()
    }
}

#[derive(Debug, Clone)]
pub struct RegistryConfig {
    pub filter: FilterParams,
    pub counter_bits: u8,
    pub coverage: Coverage,
    pub mode: LifetimeMode,
    pub issuer_id: String,
}

impl RegistryConfig {
    pub fn new(filter: FilterParams, coverage: Coverage, mode: LifetimeMode) -> Self {
        RegistryConfig {
            filter,
            counter_bits: crate::filter::DEFAULT_COUNTER_BITS,
            coverage,
            mode,
            issuer_id: "pca".to_owned(),
        }
    }
}

#[derive(Debug, Clone)]
struct IssuedRecord {
    pseudonym: Pseudonym,
    vehicle: String,
    revoked: bool,
}

/// PCA-side registry: the live counting filter over every valid unrevoked
/// pseudonym, the issued-credential store, and the signed FPL.
///
/// Single-writer: issuance and revocation are serialized; projected
/// snapshots handed to readers are immutable.
pub struct PcaRegistry {
    config: RegistryConfig,
    scheme: Arc<dyn SignatureScheme>,
    issuer_keys: SchemeKeyPair,
    counting: CountingBloomFilter,
    issued: HashMap<ElementKey, IssuedRecord>,
    fpl: FakePseudonymList,
}

impl PcaRegistry {
    pub fn new(
        config: RegistryConfig,
        scheme: Arc<dyn SignatureScheme>,
    ) -> Result<Self, CredentialError> {
        let counting = CountingBloomFilter::with_counter_bits(config.filter, config.counter_bits)?;
        let issuer_keys = scheme.keygen();
        let mut fpl = FakePseudonymList::new();
        fpl.sign(scheme.as_ref(), &issuer_keys.secret);
        Ok(PcaRegistry {
            config,
            scheme,
            issuer_keys,
            counting,
            issued: HashMap::new(),
            fpl,
        })
    }

    pub fn mode(&self) -> LifetimeMode {
        self.config.mode
    }

    pub fn coverage(&self) -> Coverage {
        self.config.coverage
    }

    pub fn scheme(&self) -> &Arc<dyn SignatureScheme> {
        &self.scheme
    }

    pub fn issuer_public_key(&self) -> &[u8] {
        &self.issuer_keys.public
    }

    pub fn verifier(&self) -> IssuerVerifier {
        IssuerVerifier {
            scheme: Arc::clone(&self.scheme),
            public_key: self.issuer_keys.public.clone(),
        }
    }

    pub fn fpl(&self) -> &FakePseudonymList {
        &self.fpl
    }

    pub fn issued_count(&self) -> usize {
        self.issued.len()
    }

    pub fn is_issued(&self, key: &ElementKey) -> bool {
        self.issued.contains_key(key)
    }

    pub fn is_active(&self, key: &ElementKey) -> bool {
        self.issued.get(key).is_some_and(|rec| !rec.revoked)
    }

    /// Issues `count` freshly keyed pseudonyms to one vehicle over `window`
    /// and inserts their element keys into the counting filter.
    ///
    /// With overlapping lifetimes every pseudonym covers the full window;
    /// with non-overlapping lifetimes the window is tiled into `count`
    /// consecutive slots of equal length (tail slots absorb any remainder
    /// second, so the union is exactly the window).
    pub fn issue_batch(
        &mut self,
        vehicle: &str,
        count: u32,
        window: Lifetime,
    ) -> Result<Vec<Pseudonym>, CredentialError> {
        if count == 0 {
            return Ok(Vec::new());
        }
        if !self.config.coverage.contains_window(window.not_before, window.not_after) {
            return Err(CredentialError::WindowOutsideCoverage);
        }
        let span = window.duration() as u128;
        let mut out = Vec::with_capacity(count as usize);
        for i in 0..count as u64 {
            let lifetime = match self.config.mode {
                LifetimeMode::Overlapping => window,
                LifetimeMode::NonOverlapping => {
                    let lo = window.not_before + (span * i as u128 / count as u128) as u64;
                    let hi = window.not_before + (span * (i as u128 + 1) / count as u128) as u64;
                    Lifetime::new(lo, hi)?
                }
            };
            let keys = self.scheme.keygen();
            let mut pseudonym = Pseudonym {
                scheme_id: self.scheme.scheme_id(),
                public_key: keys.public,
                lifetime,
                issuer_id: self.config.issuer_id.clone(),
                signature: Vec::new(),
            };
            pseudonym.signature =
                self.scheme.sign(&self.issuer_keys.secret, &pseudonym.signed_message());
            let element = pseudonym.element_key(self.config.mode);
            self.counting.insert(&element);
            self.issued.insert(
                element,
                IssuedRecord {
                    pseudonym: pseudonym.clone(),
                    vehicle: vehicle.to_owned(),
                    revoked: false,
                },
            );
            out.push(pseudonym);
        }
        Ok(out)
    }

    /// Removes a pseudonym from the live filter. The next projected
    /// snapshot no longer covers it (up to stale saturated bits).
    pub fn revoke(&mut self, key: &ElementKey) -> Result<(), CredentialError> {
        let record = self.issued.get_mut(key).ok_or(CredentialError::UnknownPseudonym)?;
        if record.revoked {
            return Err(CredentialError::AlreadyRevoked);
        }
        record.revoked = true;
        self.counting.delete(key)?;
        Ok(())
    }

    /// All element keys issued to `vehicle` that are not yet revoked.
    pub fn active_keys_of_vehicle(&self, vehicle: &str) -> Vec<ElementKey> {
        let mut keys: Vec<ElementKey> = self
            .issued
            .iter()
            .filter(|(_, rec)| rec.vehicle == vehicle && !rec.revoked)
            .map(|(k, _)| k.clone())
            .collect();
        keys.sort_unstable();
        keys
    }

    pub fn pseudonym(&self, key: &ElementKey) -> Option<&Pseudonym> {
        self.issued.get(key).map(|rec| &rec.pseudonym)
    }

    /// Adds a detected fake to the FPL and re-signs it. Returns false if it
    /// was already listed.
    pub fn fpl_add(&mut self, key: &ElementKey) -> bool {
        self.fpl.add_signed(key, self.scheme.as_ref(), &self.issuer_keys.secret)
    }

    /// Checks a reported fake: a report holds only if the pseudonym is not
    /// a genuine, correctly signed credential of this issuer.
    pub fn evidence_is_fake(&self, evidence: &Pseudonym) -> bool {
        let key = evidence.element_key(self.config.mode);
        let genuine = self.issued.contains_key(&key) && self.verifier().verify_pseudonym(evidence);
        !genuine
    }

    /// Projects the live counters to a publishable snapshot.
    pub fn project(&self, version: u64) -> BloomFilter {
        self.counting.project(version, self.config.coverage)
    }

    pub fn counting_filter(&self) -> &CountingBloomFilter {
        &self.counting
    }

    pub(crate) fn issuer_secret(&self) -> &[u8] {
        &self.issuer_keys.secret
    }
}
