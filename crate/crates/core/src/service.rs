//! PCA publication endpoint: serves versioned snapshots, deltas and FPL
//! updates over a length-prefixed binary frame protocol, accepts fake
//! reports, and applies the privacy batching rule to newcomer insertions.
//!
//! The handler works on byte frames, so it runs identically in-process and
//! over any reliable byte stream (see [`serve_connection`]).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::credentials::{CredentialError, Lifetime, PcaRegistry, Pseudonym};
use crate::filter::{BfDelta, BloomFilter, ElementKey, FilterError};
use crate::wire::{self, Reader, WireError};

pub const OP_GET_SNAPSHOT: u8 = 1;
pub const OP_GET_DELTA: u8 = 2;
pub const OP_GET_FPL: u8 = 3;
pub const OP_REPORT_FAKE: u8 = 4;

/// Upper bound on accepted frame length; snapshots dominate and stay far
/// below this.
pub const MAX_FRAME_LEN: u32 = 1 << 28;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("publishing now would expose {pending} newcomer vehicles (minimum {min})")]
    PendingBelowThreshold { pending: u64, min: u64 },
    #[error("nothing published yet")]
    NotPublished,
    #[error(transparent)]
    Credential(#[from] CredentialError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Codec(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    NotAvailable = 1,
    MalformedRequest = 2,
    ReportRejected = 3,
}

impl Status {
    fn from_u8(v: u8) -> Option<Status> {
        match v {
            0 => Some(Status::Ok),
            1 => Some(Status::NotAvailable),
            2 => Some(Status::MalformedRequest),
            3 => Some(Status::ReportRejected),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    /// Latest snapshot, or a specific retained version.
    GetSnapshot { version: Option<u64> },
    GetDelta { from: u64, to: u64 },
    GetFpl,
    /// The reported element key plus the offending pseudonym as evidence.
    ReportFake { key: ElementKey, evidence: Pseudonym },
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Request::GetSnapshot { version } => {
                out.push(OP_GET_SNAPSHOT);
                match version {
                    Some(v) => {
                        out.push(1);
                        wire::put_u64(&mut out, *v);
                    }
                    None => out.push(0),
                }
            }
            Request::GetDelta { from, to } => {
                out.push(OP_GET_DELTA);
                wire::put_u64(&mut out, *from);
                wire::put_u64(&mut out, *to);
            }
            Request::GetFpl => out.push(OP_GET_FPL),
            Request::ReportFake { key, evidence } => {
                out.push(OP_REPORT_FAKE);
                wire::put_u16(&mut out, key.as_bytes().len() as u16);
                out.extend_from_slice(key.as_bytes());
                let ev = evidence.encode();
                wire::put_u32(&mut out, ev.len() as u32);
                out.extend_from_slice(&ev);
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Request, ServiceError> {
        let mut r = Reader::new(buf);
        let req = match r.u8()? {
            OP_GET_SNAPSHOT => {
                let version = match r.u8()? {
                    0 => None,
                    1 => Some(r.u64()?),
                    _ => return Err(WireError::Invalid("version presence flag").into()),
                };
                Request::GetSnapshot { version }
            }
            OP_GET_DELTA => Request::GetDelta { from: r.u64()?, to: r.u64()? },
            OP_GET_FPL => Request::GetFpl,
            OP_REPORT_FAKE => {
                let key_len = r.u16()? as usize;
                let key = ElementKey::new(r.bytes(key_len)?.to_vec())
                    .map_err(|_| WireError::Invalid("empty element key"))?;
                let ev_len = r.u32()? as usize;
                let evidence = Pseudonym::decode(r.bytes(ev_len)?)?;
                Request::ReportFake { key, evidence }
            }
            _ => return Err(WireError::Invalid("unknown opcode").into()),
        };
        if r.remaining() != 0 {
            return Err(WireError::TrailingBytes.into());
        }
        Ok(req)
    }
}

/// Response header plus payload. Every response carries the current FPL
/// version so clients can detect a stale local list.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: Status,
    pub fpl_version: u64,
    pub payload: Vec<u8>,
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.payload.len());
        out.push(self.status as u8);
        wire::put_u64(&mut out, self.fpl_version);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Response, ServiceError> {
        let mut r = Reader::new(buf);
        let status = Status::from_u8(r.u8()?).ok_or(WireError::Invalid("status code"))?;
        let fpl_version = r.u64()?;
        let payload = r.bytes(r.remaining())?.to_vec();
        Ok(Response { status, fpl_version, payload })
    }
}

/// Snapshot bytes with the PCA's signature over their digest appended, so
/// downloads are self-authenticating without a secure channel.
pub fn encode_signed_snapshot(snapshot: &BloomFilter, registry: &PcaRegistry) -> Vec<u8> {
    let mut out = snapshot.encode();
    let digest: [u8; 32] = Sha256::digest(&out).into();
    let signature = registry.scheme().sign(registry_secret(registry), &digest);
    out.push(registry.scheme().scheme_id());
    wire::put_u16(&mut out, signature.len() as u16);
    out.extend_from_slice(&signature);
    out
}

fn registry_secret(registry: &PcaRegistry) -> &[u8] {
    registry.issuer_secret()
}

/// Splits a signed snapshot download into the snapshot and its trailer,
/// verifying the signature against the issuer.
pub fn decode_signed_snapshot(
    buf: &[u8],
    verifier: &crate::credentials::IssuerVerifier,
) -> Result<BloomFilter, ServiceError> {
    // Trailer: scheme id u8 | sig length u16 | sig.
    if buf.len() < 3 {
        return Err(WireError::Truncated.into());
    }
    let mut found = None;
    // The snapshot length is self-describing: bit count sits at offset 13.
    if buf.len() >= 21 {
        let bits = u64::from_be_bytes(buf[13..21].try_into().unwrap());
        let body_len = 4 + 1 + 8 + 8 + 1 + 8 + 8 + 8 + (bits / 8) as usize + 4;
        if buf.len() >= body_len + 3 {
            found = Some(body_len);
        }
    }
    let body_len = found.ok_or(WireError::Truncated)?;
    let (body, trailer) = buf.split_at(body_len);
    let mut r = Reader::new(trailer);
    let scheme_id = r.u8()?;
    let sig_len = r.u16()? as usize;
    let signature = r.bytes(sig_len)?.to_vec();
    if r.remaining() != 0 {
        return Err(WireError::TrailingBytes.into());
    }
    if scheme_id != verifier.scheme.scheme_id() {
        return Err(WireError::Invalid("snapshot signed under unexpected scheme").into());
    }
    let digest: [u8; 32] = Sha256::digest(body).into();
    if !verifier.scheme.verify(&verifier.public_key, &digest, &signature) {
        return Err(WireError::Invalid("snapshot signature rejected").into());
    }
    Ok(BloomFilter::decode(body)?)
}

/// Record of one published version, kept for the privacy experiments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishedVersion {
    pub version: u64,
    /// Distinct newcomer vehicles whose pseudonyms first appear in this
    /// version's delta. Zero for the initial snapshot and for
    /// revocation-only updates.
    pub newcomer_vehicles: u64,
    pub flipped_bits: u64,
    /// True when published by the administrative flush below the batching
    /// threshold.
    pub forced: bool,
}

#[derive(Debug, Clone)]
pub struct PublicationConfig {
    /// Minimum distinct newcomer vehicles per newcomer-bearing update; the
    /// anonymity-set floor.
    pub min_newcomer_vehicles: u64,
    /// Snapshots retained for download; older clients resync via the full
    /// snapshot.
    pub retained_snapshots: usize,
}

impl Default for PublicationConfig {
    fn default() -> Self {
        PublicationConfig { min_newcomer_vehicles: 1000, retained_snapshots: 8 }
    }
}

/// Publication side of the PCA: the registry plus the published snapshot
/// chain, consecutive deltas, and the newcomer buffer.
pub struct PublicationState {
    registry: PcaRegistry,
    config: PublicationConfig,
    snapshots: BTreeMap<u64, BloomFilter>,
    deltas: BTreeMap<(u64, u64), BfDelta>,
    next_version: u64,
    pending_vehicles: BTreeSet<String>,
    published_log: Vec<PublishedVersion>,
}

impl PublicationState {
    pub fn new(registry: PcaRegistry, config: PublicationConfig) -> Self {
        PublicationState {
            registry,
            config,
            snapshots: BTreeMap::new(),
            deltas: BTreeMap::new(),
            next_version: 0,
            pending_vehicles: BTreeSet::new(),
            published_log: Vec::new(),
        }
    }

    pub fn registry(&self) -> &PcaRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut PcaRegistry {
        &mut self.registry
    }

    pub fn config(&self) -> &PublicationConfig {
        &self.config
    }

    pub fn latest_version(&self) -> Option<u64> {
        self.snapshots.keys().next_back().copied()
    }

    pub fn snapshot(&self, version: u64) -> Option<&BloomFilter> {
        self.snapshots.get(&version)
    }

    pub fn delta(&self, from: u64, to: u64) -> Option<&BfDelta> {
        self.deltas.get(&(from, to))
    }

    pub fn pending_newcomer_vehicles(&self) -> u64 {
        self.pending_vehicles.len() as u64
    }

    pub fn published_log(&self) -> &[PublishedVersion] {
        &self.published_log
    }

    /// Publishes the first snapshot of the coverage period.
    pub fn publish_initial(&mut self) -> Result<u64, ServiceError> {
        self.publish_version(0, false)
    }

    /// Issues pseudonyms for a newcomer vehicle and buffers it for batched
    /// publication. Publishes one new version as soon as the buffer holds
    /// the configured minimum of distinct vehicles; until then newcomers
    /// validate via the signature fallback.
    pub fn admit_newcomer(
        &mut self,
        vehicle: &str,
        count: u32,
        window: Lifetime,
    ) -> Result<(Vec<Pseudonym>, Option<u64>), ServiceError> {
        let batch = self.registry.issue_batch(vehicle, count, window)?;
        self.pending_vehicles.insert(vehicle.to_owned());
        let published = if self.pending_newcomer_vehicles() >= self.config.min_newcomer_vehicles {
            Some(self.publish_pending(false)?)
        } else {
            None
        };
        Ok((batch, published))
    }

    /// Publishes a new version for registry changes that carry no newcomer
    /// pseudonyms (revocations, FPL-driven rebuilds). Refuses to run while
    /// newcomers are buffered below the threshold, since that would expose
    /// them; `flush_pending` is the explicit override.
    pub fn publish(&mut self) -> Result<u64, ServiceError> {
        let pending = self.pending_newcomer_vehicles();
        if pending > 0 && pending < self.config.min_newcomer_vehicles {
            return Err(ServiceError::PendingBelowThreshold {
                pending,
                min: self.config.min_newcomer_vehicles,
            });
        }
        self.publish_pending(false)
    }

    /// Administrative flush: publishes whatever is buffered, below the
    /// threshold if need be. The published record is marked, since it
    /// shrinks the newcomers' anonymity set.
    pub fn flush_pending(&mut self) -> Result<u64, ServiceError> {
        let forced = self.pending_newcomer_vehicles() < self.config.min_newcomer_vehicles;
        self.publish_pending(forced)
    }

    fn publish_pending(&mut self, forced: bool) -> Result<u64, ServiceError> {
        self.publish_version(self.pending_vehicles.len() as u64, forced)
    }

    fn publish_version(&mut self, newcomer_vehicles: u64, forced: bool) -> Result<u64, ServiceError> {
        let version = self.next_version;
        let snapshot = self.registry.project(version);
        let flipped_bits = match self.snapshots.get(&version.wrapping_sub(1)) {
            Some(previous) => {
                let delta = previous.delta_to(&snapshot)?;
                let flips = delta.flip_count();
                self.deltas.insert((version - 1, version), delta);
                flips
            }
            None => snapshot.set_bits(),
        };
        self.snapshots.insert(version, snapshot);
        self.next_version += 1;
        self.pending_vehicles.clear();
        self.published_log.push(PublishedVersion { version, newcomer_vehicles, flipped_bits, forced });
        self.prune_retained();
        Ok(version)
    }

    fn prune_retained(&mut self) {
        while self.snapshots.len() > self.config.retained_snapshots {
            let oldest = *self.snapshots.keys().next().unwrap();
            self.snapshots.remove(&oldest);
        }
        if let Some(&oldest) = self.snapshots.keys().next() {
            self.deltas.retain(|&(from, _), _| from >= oldest);
        }
    }

    /// Handles one decoded request against the current state.
    pub fn handle_request(&mut self, request: Request) -> Response {
        let fpl_version = self.registry.fpl().version();
        match request {
            Request::GetSnapshot { version } => {
                let chosen = match version {
                    Some(v) => self.snapshots.get(&v),
                    None => self.latest_version().and_then(|v| self.snapshots.get(&v)),
                };
                match chosen {
                    Some(snapshot) => Response {
                        status: Status::Ok,
                        fpl_version,
                        payload: encode_signed_snapshot(snapshot, &self.registry),
                    },
                    None => Response { status: Status::NotAvailable, fpl_version, payload: Vec::new() },
                }
            }
            Request::GetDelta { from, to } => {
                if from == to && self.snapshots.contains_key(&from) {
                    return Response {
                        status: Status::Ok,
                        fpl_version,
                        payload: BfDelta::empty(from).encode(),
                    };
                }
                match self.deltas.get(&(from, to)) {
                    Some(delta) => Response { status: Status::Ok, fpl_version, payload: delta.encode() },
                    // Only consecutive deltas are stored; anything else
                    // resyncs via the full snapshot.
                    None => Response { status: Status::NotAvailable, fpl_version, payload: Vec::new() },
                }
            }
            Request::GetFpl => Response {
                status: Status::Ok,
                fpl_version,
                payload: self.registry.fpl().encode(),
            },
            Request::ReportFake { key, evidence } => {
                if evidence.element_key(self.registry.mode()) != key
                    || !self.registry.evidence_is_fake(&evidence)
                {
                    return Response {
                        status: Status::ReportRejected,
                        fpl_version,
                        payload: Vec::new(),
                    };
                }
                self.registry.fpl_add(&key);
                Response {
                    status: Status::Ok,
                    fpl_version: self.registry.fpl().version(),
                    payload: Vec::new(),
                }
            }
        }
    }

    /// Byte-level entry point: decodes a request frame payload, returns the
    /// response frame payload. Undecodable requests yield MalformedRequest.
    pub fn handle_frame(&mut self, frame: &[u8]) -> Vec<u8> {
        let response = match Request::decode(frame) {
            Ok(request) => self.handle_request(request),
            Err(_) => Response {
                status: Status::MalformedRequest,
                fpl_version: self.registry.fpl().version(),
                payload: Vec::new(),
            },
        };
        response.encode()
    }
}

/// Writes one `u32 length | payload` frame.
pub fn write_frame(stream: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    stream.write_all(&(payload.len() as u32).to_be_bytes())?;
    stream.write_all(payload)?;
    stream.flush()
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame(stream: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len_buf = [0u8; 4];
    match stream.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too long"));
    }
    let mut payload = vec![0u8; len as usize];
    stream.read_exact(&mut payload)?;
    Ok(Some(payload))
}

/// Serves request frames from a byte stream until it closes.
pub fn serve_connection<S: Read + Write>(
    state: &mut PublicationState,
    stream: &mut S,
) -> io::Result<()> {
    while let Some(frame) = read_frame(stream)? {
        let response = state.handle_frame(&frame);
        write_frame(stream, &response)?;
    }
    Ok(())
}

/// Client-side helper: sends one request over a stream and decodes the
/// response.
pub fn roundtrip<S: Read + Write>(stream: &mut S, request: &Request) -> io::Result<Response> {
    write_frame(stream, &request.encode())?;
    let frame = read_frame(stream)?
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"))?;
    Response::decode(&frame).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}
