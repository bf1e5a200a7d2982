//! Client identities and the reward ledger.
//!
//! Each client holds an Ed25519 key pair; the aggregator holds a read-only
//! registry mapping client ids to public keys and only aggregates updates
//! whose signature verifies under the registered key. Accepted updates are
//! credited in an append-only JSON-lines ledger where every entry commits to
//! its predecessor with SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::ClientUpdate;
use crate::error::{FedError, Result};

pub const GENESIS_HASH: [u8; 32] = [0u8; 32];

/// `round ‖ client_id ‖ n_k ‖ tensor block`, integers big-endian.
pub fn canonical_bytes(round: u32, client_id: u32, n_k: u64, tensor_block: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + tensor_block.len());
    out.extend_from_slice(&round.to_be_bytes());
    out.extend_from_slice(&client_id.to_be_bytes());
    out.extend_from_slice(&n_k.to_be_bytes());
    out.extend_from_slice(tensor_block);
    out
}

#[derive(Clone)]
pub struct ClientIdentity {
    pub client_id: u32,
    signing: Option<SigningKey>,
    public: VerifyingKey,
}

impl std::fmt::Debug for ClientIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientIdentity")
            .field("client_id", &self.client_id)
            .field("public_key", &B64.encode(self.public.as_bytes()))
            .field("has_private_key", &self.signing.is_some())
            .finish()
    }
}

impl ClientIdentity {
    pub fn generate(client_id: u32) -> Self {
        let mut secret = [0u8; 32];
        rand::rng().fill(&mut secret);
        Self::from_secret(client_id, secret)
    }

    /// Deterministic key pair, for reproducible simulations.
    pub fn from_seed(client_id: u32, seed: u64) -> Self {
        let mut secret = [0u8; 32];
        for (i, chunk) in secret.chunks_mut(8).enumerate() {
            let word = crate::derive_seed_path(seed, &[0x1d, client_id as u64, i as u64]);
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self::from_secret(client_id, secret)
    }

    pub fn from_secret(client_id: u32, secret: [u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(&secret);
        Self {
            client_id,
            public: signing.verifying_key(),
            signing: Some(signing),
        }
    }

    pub fn public_only(client_id: u32, public: [u8; 32]) -> Result<Self> {
        let public = VerifyingKey::from_bytes(&public)
            .map_err(|e| FedError::Identity(format!("client {client_id}: invalid public key: {e}")))?;
        Ok(Self {
            client_id,
            signing: None,
            public,
        })
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.public.to_bytes()
    }

    pub fn has_private_key(&self) -> bool {
        self.signing.is_some()
    }

    fn key_paths(dir: &Path, client_id: u32) -> (PathBuf, PathBuf) {
        (
            dir.join(format!("client_{client_id}.key")),
            dir.join(format!("client_{client_id}.pub")),
        )
    }

    /// Writes `client_<id>.key` (base64 secret) and `client_<id>.pub`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let signing = self
            .signing
            .as_ref()
            .ok_or_else(|| FedError::Identity(format!("client {}: no private key to write", self.client_id)))?;
        fs::create_dir_all(dir)?;
        let (key, public) = Self::key_paths(dir, self.client_id);
        fs::write(key, B64.encode(signing.to_bytes()) + "\n")?;
        fs::write(public, B64.encode(self.public.as_bytes()) + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path, client_id: u32) -> Result<Self> {
        let (key, _) = Self::key_paths(dir, client_id);
        let text = fs::read_to_string(&key).map_err(|e| {
            FedError::Identity(format!("client {client_id}: cannot read {}: {e}", key.display()))
        })?;
        let secret = decode_key(text.trim(), client_id)?;
        Ok(Self::from_secret(client_id, secret))
    }
}

fn decode_key(text: &str, client_id: u32) -> Result<[u8; 32]> {
    let bytes = B64
        .decode(text)
        .map_err(|e| FedError::Identity(format!("client {client_id}: bad base64 key: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| FedError::Identity(format!("client {client_id}: key is not 32 bytes")))
}

/// Detached signature over the canonical update bytes.
pub fn sign_update(identity: &ClientIdentity, canonical: &[u8]) -> Result<Vec<u8>> {
    let signing = identity
        .signing
        .as_ref()
        .ok_or_else(|| FedError::Identity(format!("client {} has no private key", identity.client_id)))?;
    Ok(signing.sign(canonical).to_bytes().to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    UnknownIdentity,
    MalformedSignature,
    BadSignature,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RejectReason::UnknownIdentity => "unknown identity",
            RejectReason::MalformedSignature => "malformed signature",
            RejectReason::BadSignature => "signature does not verify",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// Public keys by client id. Read-only once the aggregator starts.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    keys: BTreeMap<u32, VerifyingKey>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, client_id: u32, public: [u8; 32]) -> Result<()> {
        if self.keys.contains_key(&client_id) {
            return Err(FedError::Identity(format!("client {client_id} already registered")));
        }
        let identity = ClientIdentity::public_only(client_id, public)?;
        self.keys.insert(client_id, identity.public);
        Ok(())
    }

    pub fn contains(&self, client_id: u32) -> bool {
        self.keys.contains_key(&client_id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn verify(&self, client_id: u32, canonical: &[u8], signature: &[u8]) -> Verdict {
        let Some(key) = self.keys.get(&client_id) else {
            return Verdict::Reject(RejectReason::UnknownIdentity);
        };
        let Ok(sig) = Signature::from_slice(signature) else {
            return Verdict::Reject(RejectReason::MalformedSignature);
        };
        match key.verify_strict(canonical, &sig) {
            Ok(()) => Verdict::Accept,
            Err(_) => Verdict::Reject(RejectReason::BadSignature),
        }
    }

    /// JSON object `{"<client_id>": "<base64 public key>", ...}`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, String> = self
            .keys
            .iter()
            .map(|(id, k)| (id.to_string(), B64.encode(k.as_bytes())))
            .collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, String> = serde_json::from_str(text)?;
        let mut reg = Self::new();
        for (id, key) in map {
            let id: u32 = id
                .parse()
                .map_err(|_| FedError::Identity(format!("registry key {id:?} is not a client id")))?;
            reg.register(id, decode_key(&key, id)?)?;
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

/// Accept iff the update's signature verifies under the key registered for
/// its client id.
pub fn verify_update(registry: &KeyRegistry, update: &ClientUpdate, canonical: &[u8]) -> Verdict {
    registry.verify(update.client_id, canonical, &update.signature)
}

mod hex32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    /// Lowercase only, so every stored digest has exactly one spelling.
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        if hex::encode(out) != s {
            return Err(serde::de::Error::custom("digest must be lowercase hex"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub index: u64,
    pub round: u32,
    pub client_id: u32,
    pub reward: u64,
    #[serde(with = "hex32")]
    pub prev_hash: [u8; 32],
    #[serde(with = "hex32")]
    pub entry_hash: [u8; 32],
}

impl LedgerEntry {
    pub fn compute_hash(index: u64, round: u32, client_id: u32, reward: u64, prev_hash: &[u8; 32]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(index.to_be_bytes());
        h.update(round.to_be_bytes());
        h.update(client_id.to_be_bytes());
        h.update(reward.to_be_bytes());
        h.update(prev_hash);
        h.finalize().into()
    }
}

/// Checks linkage and digests; the error names the first broken index.
pub fn validate_chain(entries: &[LedgerEntry]) -> Result<()> {
    let mut prev = GENESIS_HASH;
    for (i, e) in entries.iter().enumerate() {
        let broken = |reason: &str| FedError::Ledger {
            index: i,
            reason: reason.to_string(),
        };
        if e.index != i as u64 {
            return Err(broken("index out of sequence"));
        }
        if e.prev_hash != prev {
            return Err(broken("prev_hash does not match the preceding entry"));
        }
        if e.entry_hash != LedgerEntry::compute_hash(e.index, e.round, e.client_id, e.reward, &e.prev_hash) {
            return Err(broken("entry_hash does not match entry contents"));
        }
        prev = e.entry_hash;
    }
    Ok(())
}

/// Parses and validates JSON-lines ledger text. Either every line forms a
/// valid chain or the error names the first broken index.
pub fn parse_ledger(text: &str) -> Result<Vec<LedgerEntry>> {
    let mut entries = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(entries);
    }
    for (i, line) in body.split('\n').enumerate() {
        let entry: LedgerEntry = serde_json::from_str(line).map_err(|e| FedError::Ledger {
            index: i,
            reason: format!("unparseable entry: {e}"),
        })?;
        entries.push(entry);
    }
    validate_chain(&entries)?;
    Ok(entries)
}

#[derive(Debug, Default)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    path: Option<PathBuf>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a file-backed ledger, validating any existing chain.
    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            parse_ledger(&fs::read_to_string(path)?)?
        } else {
            Vec::new()
        };
        Ok(Self {
            entries,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        validate_chain(&self.entries)
    }

    pub fn credit(&mut self, round: u32, client_id: u32, reward: u64) -> Result<&LedgerEntry> {
        self.validate()?;
        let index = self.entries.len() as u64;
        let prev_hash = self.entries.last().map_or(GENESIS_HASH, |e| e.entry_hash);
        let entry = LedgerEntry {
            index,
            round,
            client_id,
            reward,
            prev_hash,
            entry_hash: LedgerEntry::compute_hash(index, round, client_id, reward, &prev_hash),
        };
        if let Some(path) = &self.path {
            let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("ledger entry serializes") + "\n")
            .collect()
    }

    /// Total reward per client.
    pub fn balances(&self) -> BTreeMap<u32, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.client_id).or_insert(0) += e.reward;
        }
        out
    }
}
