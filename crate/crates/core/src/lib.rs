//! Proactive pseudonym validation for vehicular networks.
//!
//! A pseudonymous certification authority (PCA) keeps a counting Bloom filter
//! over every currently valid pseudonym and publishes plain Bloom-filter
//! snapshots plus compressed deltas. Receivers validate pseudonyms with cheap
//! hash tests instead of signature verifications, falling back to the
//! classic PCA-signature check for pseudonyms the filter does not yet cover.
//!
//! Crate layout:
//! - [`filter`]: standard and counting Bloom filters, compressed bit deltas,
//!   and their wire formats.
//! - [`credentials`]: pseudonyms, issuance, revocation, the fake-pseudonym
//!   list, and pluggable signature schemes.
//! - [`validation`]: the receiver-side validation pipeline with fallback
//!   budget and probabilistic cross-verification.
//! - [`analytics`]: closed-form false-positive, delta-compression, and
//!   two-class M/D/1 queueing models.
//! - [`service`]: the PCA publication endpoint (snapshots, deltas, FPL,
//!   fake reports) over a length-prefixed frame protocol.
//! - [`sim`]: discrete-event simulation of the verification queue plus
//!   attacker and privacy experiments.

pub mod analytics;
pub mod credentials;
pub mod filter;
pub mod service;
pub mod sim;
pub mod validation;
pub mod wire;
