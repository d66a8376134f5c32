//! History gossip: per-node databases, filtered exponential selection,
//! signed round messages and trained-model inference.
//!
//! Wire layout of a [`RoundMessage`], all little-endian:
//!
//! ```text
//! own block | u8 gossip flag | [gossiped block | u32 gossip distance]
//! block = u32 origin | u32 round | u32 len | f64 * len | u16 sig_len | sig
//! ```
//!
//! The bracketed part is present only when the flag is 1. Signatures cover
//! the block up to and including the values.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ed25519_dalek::{Signature, SigningKey, VerifyingKey};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::ParamVector;
use crate::rng;
use crate::topology::NodeId;

pub type Round = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct SignedHistory {
    pub origin: NodeId,
    pub round: Round,
    pub history: ParamVector,
    pub signature: Vec<u8>,
}

/// Canonical bytes covered by a signature.
pub fn signing_bytes(origin: NodeId, round: Round, history: &ParamVector) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 8 * history.len());
    out.extend_from_slice(&to_u32(origin, "origin")?.to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&to_u32(history.len(), "vector length")?.to_le_bytes());
    for v in history.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

impl SignedHistory {
    pub fn sign(origin: NodeId, round: Round, history: ParamVector, signer: &dyn Signer) -> Result<Self> {
        let signature = signer.sign(&signing_bytes(origin, round, &history)?)?;
        if signature.len() > u16::MAX as usize {
            return Err(Error::Signature("signature longer than 65535 bytes".into()));
        }
        Ok(SignedHistory {
            origin,
            round,
            history,
            signature,
        })
    }

    pub fn verify(&self, verifier: &dyn Verifier) -> Result<()> {
        verifier.verify(self.origin, &signing_bytes(self.origin, self.round, &self.history)?, &self.signature)
    }

    fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        out.extend_from_slice(&signing_bytes(self.origin, self.round, &self.history)?);
        let len = u16::try_from(self.signature.len())
            .map_err(|_| Error::Signature("signature longer than 65535 bytes".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.signature);
        Ok(())
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self> {
        let origin = r.u32()? as NodeId;
        let round = r.u32()?;
        let len = r.u32()? as usize;
        if len > r.remaining() / 8 {
            return Err(r.error(format!("vector length {len} exceeds remaining bytes")));
        }
        let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let sig_len = r.u16()? as usize;
        let signature = r.take(sig_len)?.to_vec();
        Ok(SignedHistory {
            origin,
            round,
            history: ParamVector::new(values),
            signature,
        })
    }
}

/// What a node knows about another node's history. Distance 0 is reserved
/// for a node's own bookkeeping; received records have distance >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub signed: SignedHistory,
    pub distance: u32,
    pub forwarder: NodeId,
}

impl HistoryRecord {
    pub fn origin(&self) -> NodeId {
        self.signed.origin
    }

    pub fn round(&self) -> Round {
        self.signed.round
    }

    pub fn history(&self) -> &ParamVector {
        &self.signed.history
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbChange {
    Inserted,
    Updated,
    Ignored,
}

/// One record per origin, the most recent round winning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryDb {
    records: BTreeMap<NodeId, HistoryRecord>,
    capacity: Option<usize>,
}

impl HistoryDb {
    pub fn new(capacity: Option<usize>) -> Self {
        HistoryDb {
            records: BTreeMap::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, origin: NodeId) -> Option<&HistoryRecord> {
        self.records.get(&origin)
    }

    /// Records in ascending origin order.
    pub fn records(&self) -> impl Iterator<Item = &HistoryRecord> {
        self.records.values()
    }

    /// Inserts unseen origins, replaces strictly older rounds, ignores the
    /// rest. Over capacity, the record with the oldest round (lowest origin on
    /// ties) is evicted.
    pub fn update(&mut self, incoming: HistoryRecord) -> DbChange {
        let origin = incoming.origin();
        let change = match self.records.get(&origin) {
            None => DbChange::Inserted,
            Some(old) if incoming.round() > old.round() => DbChange::Updated,
            Some(_) => return DbChange::Ignored,
        };
        self.records.insert(origin, incoming);
        if let Some(cap) = self.capacity {
            while self.records.len() > cap {
                let stalest = self
                    .records
                    .values()
                    .min_by_key(|r| (r.round(), r.origin()))
                    .map(HistoryRecord::origin)
                    .expect("non-empty over capacity");
                self.records.remove(&stalest);
                if stalest == origin {
                    return DbChange::Ignored;
                }
            }
        }
        change
    }

    /// Drops every record from a round before `oldest`; returns how many.
    pub fn drop_outdated(&mut self, oldest: Round) -> usize {
        let before = self.records.len();
        self.records.retain(|_, r| r.round() >= oldest);
        before - self.records.len()
    }
}

/// Records that may be gossiped from `me` to `neighbor`: neither originated
/// by either of them nor received from `neighbor`.
pub fn filter_db(db: &HistoryDb, me: NodeId, neighbor: NodeId) -> Vec<&HistoryRecord> {
    db.records()
        .filter(|r| r.origin() != me && r.origin() != neighbor && r.forwarder != neighbor)
        .collect()
}

/// Unnormalized selection weight of a record at `distance`.
pub fn selection_weight(lambda: f64, distance: u32) -> f64 {
    lambda * (-lambda * distance as f64).exp()
}

/// Picks one record with probability proportional to `lambda * exp(-lambda * d)`.
pub fn select_gossip<'a, R: Rng + ?Sized>(
    filtered: &[&'a HistoryRecord],
    lambda: f64,
    rng: &mut R,
) -> Result<Option<&'a HistoryRecord>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("gossip lambda must be positive"));
    }
    match filtered {
        [] => Ok(None),
        [only] => Ok(Some(*only)),
        _ => {
            // shifting by the nearest distance keeps far records from underflowing
            let nearest = filtered.iter().map(|r| r.distance).min().unwrap_or(0);
            let weights: Vec<f64> = filtered
                .iter()
                .map(|r| (-lambda * (r.distance - nearest) as f64).exp())
                .collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| Error::NumericFailure(format!("gossip weights: {e}")))?;
            Ok(Some(filtered[dist.sample(rng)]))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub own: SignedHistory,
    pub gossiped: Option<SignedHistory>,
    /// Hops the gossiped history will have travelled on arrival.
    pub gossip_distance: u32,
}

impl RoundMessage {
    pub fn sender(&self) -> NodeId {
        self.own.origin
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.own.encode_into(&mut out)?;
        match &self.gossiped {
            None => out.push(0),
            Some(g) => {
                out.push(1);
                g.encode_into(&mut out)?;
                out.extend_from_slice(&self.gossip_distance.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let own = SignedHistory::decode_from(&mut r)?;
        let flag_at = r.pos;
        let (gossiped, gossip_distance) = match r.u8()? {
            0 => (None, 0),
            1 => {
                let g = SignedHistory::decode_from(&mut r)?;
                (Some(g), r.u32()?)
            }
            other => {
                return Err(Error::Parse {
                    offset: flag_at,
                    message: format!("gossip flag must be 0 or 1, got {other}"),
                })
            }
        };
        if r.remaining() != 0 {
            return Err(r.error(format!("{} trailing bytes", r.remaining())));
        }
        Ok(RoundMessage {
            own,
            gossiped,
            gossip_distance,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, message: String) -> Error {
        Error::Parse {
            offset: self.pos,
            message,
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!("need {n} bytes, {} left", self.remaining())));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Builds a message from an already signed own block. The gossiped block
/// keeps its originator's signature.
pub fn compose_with(own: SignedHistory, selected: Option<&HistoryRecord>) -> RoundMessage {
    RoundMessage {
        own,
        gossiped: selected.map(|r| r.signed.clone()),
        gossip_distance: selected.map_or(0, |r| r.distance + 1),
    }
}

pub fn compose_message(
    me: NodeId,
    history: &ParamVector,
    round: Round,
    selected: Option<&HistoryRecord>,
    signer: &dyn Signer,
) -> Result<RoundMessage> {
    let own = SignedHistory::sign(me, round, history.clone(), signer)?;
    Ok(compose_with(own, selected))
}

/// `h^T - h^(T-1)` when the previous history is exactly one round older.
/// The round-0 history is itself the first trained model.
pub fn infer_trained_model(prev: Option<(Round, &ParamVector)>, current: &SignedHistory) -> Result<Option<ParamVector>> {
    match prev {
        Some((r, h)) if r + 1 == current.round => current.history.sub(h).map(Some),
        _ if current.round == 0 => Ok(Some(current.history.clone())),
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub sender: NodeId,
    pub round: Round,
    pub trained_model: Option<ParamVector>,
    pub own_change: DbChange,
    pub gossip_change: Option<DbChange>,
}

/// Verifies both blocks, infers the sender's trained model and stores both
/// histories. A message failing any check changes nothing.
pub fn receive_message(
    me: NodeId,
    msg: &RoundMessage,
    db: &mut HistoryDb,
    prev_known: Option<(Round, &ParamVector)>,
    verifier: &dyn Verifier,
) -> Result<Received> {
    let sender = msg.sender();
    msg.own.verify(verifier)
        .map_err(|e| Error::Rejected(format!("own block from {sender}: {e}")))?;
    if let Some(g) = &msg.gossiped {
        g.verify(verifier)
            .map_err(|e| Error::Rejected(format!("gossiped block from {sender}: {e}")))?;
        if msg.gossip_distance < 2 {
            return Err(Error::Rejected(format!("gossip distance {} below 2", msg.gossip_distance)));
        }
    }
    let known_round = prev_known.map(|(r, _)| r).into_iter().chain(db.get(sender).map(HistoryRecord::round)).max();
    if let Some(r) = known_round {
        if msg.own.round < r {
            return Err(Error::Rejected(format!(
                "round regression from {sender}: {} after {r}",
                msg.own.round
            )));
        }
    }
    let trained_model = infer_trained_model(prev_known, &msg.own)?;
    let own_change = db.update(HistoryRecord {
        signed: msg.own.clone(),
        distance: 1,
        forwarder: sender,
    });
    let gossip_change = msg.gossiped.as_ref().map(|g| {
        if g.origin == me {
            DbChange::Ignored
        } else {
            db.update(HistoryRecord {
                signed: g.clone(),
                distance: msg.gossip_distance,
                forwarder: sender,
            })
        }
    });
    Ok(Received {
        sender,
        round: msg.own.round,
        trained_model,
        own_change,
        gossip_change,
    })
}

pub trait Signer: Send + Sync {
    fn sign(&self, message: &[u8]) -> Result<Vec<u8>>;
}

pub trait Verifier: Send + Sync {
    fn verify(&self, origin: NodeId, message: &[u8], signature: &[u8]) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureScheme {
    #[default]
    Ed25519,
    /// SHA-256 over a per-node secret; fast, for tests and large sweeps.
    KeyedHash,
}

impl fmt::Display for SignatureScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignatureScheme::Ed25519 => "ed25519",
            SignatureScheme::KeyedHash => "keyed_hash",
        })
    }
}

struct Ed25519Signer(SigningKey);

impl Signer for Ed25519Signer {
    fn sign(&self, message: &[u8]) -> Result<Vec<u8>> {
        use ed25519_dalek::Signer as _;
        Ok(self.0.sign(message).to_bytes().to_vec())
    }
}

struct Ed25519Verifier(Vec<VerifyingKey>);

impl Verifier for Ed25519Verifier {
    fn verify(&self, origin: NodeId, message: &[u8], signature: &[u8]) -> Result<()> {
        let key = self
            .0
            .get(origin)
            .ok_or_else(|| Error::Signature(format!("no public key for node {origin}")))?;
        let sig = Signature::from_slice(signature).map_err(|e| Error::Signature(e.to_string()))?;
        key.verify_strict(message, &sig)
            .map_err(|_| Error::Signature(format!("bad signature for node {origin}")))
    }
}

struct HashSigner([u8; 32]);

fn keyed_hash(secret: &[u8; 32], message: &[u8]) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(secret);
    h.update(message);
    h.finalize().to_vec()
}

impl Signer for HashSigner {
    fn sign(&self, message: &[u8]) -> Result<Vec<u8>> {
        Ok(keyed_hash(&self.0, message))
    }
}

struct HashVerifier(Vec<[u8; 32]>);

impl Verifier for HashVerifier {
    fn verify(&self, origin: NodeId, message: &[u8], signature: &[u8]) -> Result<()> {
        let secret = self
            .0
            .get(origin)
            .ok_or_else(|| Error::Signature(format!("no key for node {origin}")))?;
        if keyed_hash(secret, message) == signature {
            Ok(())
        } else {
            Err(Error::Signature(format!("bad signature for node {origin}")))
        }
    }
}

/// Per-node signers plus a verifier knowing every node's public key.
pub struct KeyRing {
    pub signers: Vec<Arc<dyn Signer>>,
    pub verifier: Arc<dyn Verifier>,
}

impl KeyRing {
    pub fn generate(scheme: SignatureScheme, seed: u64, nodes: usize) -> Self {
        let secrets: Vec<[u8; 32]> = (0..nodes)
            .map(|i| {
                let mut bytes = [0u8; 32];
                rng::stream(seed, rng::Stream::Keys, i as u64, 0).fill_bytes(&mut bytes);
                bytes
            })
            .collect();
        match scheme {
            SignatureScheme::Ed25519 => {
                let keys: Vec<SigningKey> = secrets.iter().map(SigningKey::from_bytes).collect();
                KeyRing {
                    verifier: Arc::new(Ed25519Verifier(keys.iter().map(SigningKey::verifying_key).collect())),
                    signers: keys.into_iter().map(|k| Arc::new(Ed25519Signer(k)) as Arc<dyn Signer>).collect(),
                }
            }
            SignatureScheme::KeyedHash => KeyRing {
                signers: secrets.iter().map(|s| Arc::new(HashSigner(*s)) as Arc<dyn Signer>).collect(),
                verifier: Arc::new(HashVerifier(secrets)),
            },
        }
    }
}
