//! Character-level byte-pair encoding with reserved PAD/SOS/EOS/UNK ids.
//!
//! Whitespace is an ordinary symbol: there is no pre-tokenization, so merges
//! may span word boundaries. Merge selection is greedy on pair frequency with
//! ties broken by the lexicographic order of the concatenated pair (then of
//! the left symbol), which makes training a pure function of the corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub const PAD_ID: u32 = 0;
pub const SOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const NUM_RESERVED: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
/// Glyph emitted by [`Vocab::decode`] for unknown ids.
pub const UNK_TOKEN: &str = "<unk>";

const VOCAB_FILE_VERSION: u32 = 1;

/// A token-id sequence. Complete captions are `SOS … EOS`.
pub type TokenSequence = Vec<u32>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(String, String)>,
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    merges: Vec<[String; 2]>,
    tokens: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    fn from_parts(merges: Vec<(String, String)>, id_to_token: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::MalformedSequence(format!("duplicate token {t:?}")));
            }
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                token_to_id
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::MalformedSequence(format!("merge refers to unknown token {s:?}")))
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            let merged = lookup(&format!("{l}{r}"))?;
            merge_rank.entry((li, ri)).or_insert((rank, merged));
        }
        Ok(Self {
            merges,
            token_to_id,
            id_to_token,
            merge_rank,
        })
    }

    /// Encodes `text` as `SOS … EOS`, applying merges in rank order.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut symbols: Vec<u32> = text
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK_ID)
            })
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.merge_rank
                        .get(&(w[0], w[1]))
                        .map(|&(rank, id)| (rank, w[0], w[1], id))
                })
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, left, right, merged)) = best else {
                break;
            };
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = out;
        }
        let mut ids = Vec::with_capacity(symbols.len() + 2);
        ids.push(SOS_ID);
        ids.extend(symbols);
        ids.push(EOS_ID);
        ids
    }

    /// Concatenates token strings, dropping PAD/SOS/EOS and rendering UNK as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD_ID | SOS_ID | EOS_ID => {}
                UNK_ID => out.push_str(UNK_TOKEN),
                _ => out.push_str(self.token(id).ok_or(Error::IdOutOfRange(id))?),
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FILE_VERSION,
            merges: self.merges.iter().map(|(l, r)| [l.clone(), r.clone()]).collect(),
            tokens: self
                .id_to_token
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i as u32))
                .collect(),
        };
        serde_json::to_string(&file).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.version != VOCAB_FILE_VERSION {
            return Err(Error::MalformedSequence(format!(
                "unsupported vocab version {}",
                file.version
            )));
        }
        let n = file.tokens.len();
        let mut id_to_token = vec![None; n];
        for (tok, id) in file.tokens {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::MalformedSequence(format!("token id {id} not contiguous")))?;
            *slot = Some(tok);
        }
        let id_to_token: Vec<String> = id_to_token
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| Error::MalformedSequence("token ids not contiguous".into()))?;
        let reserved = [PAD_TOKEN, SOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        if id_to_token.len() < NUM_RESERVED || id_to_token[..NUM_RESERVED] != reserved {
            return Err(Error::MalformedSequence("reserved ids must be 0..3".into()));
        }
        let merges = file.merges.into_iter().map(|[l, r]| (l, r)).collect();
        Self::from_parts(merges, id_to_token)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&s)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Learns a BPE vocabulary with exactly `target_vocab_size` entries.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut chars = BTreeSet::new();
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for text in corpus {
        let text = text.as_ref();
        chars.extend(text.chars());
        *counts.entry(text).or_default() += 1;
    }
    let minimum = NUM_RESERVED + chars.len();
    if target_vocab_size < minimum {
        return Err(Error::VocabTooSmall {
            requested: target_vocab_size,
            minimum,
        });
    }

    let mut id_to_token: Vec<String> = [PAD_TOKEN, SOS_TOKEN, EOS_TOKEN, UNK_TOKEN]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut token_to_id: HashMap<String, u32> = HashMap::new();
    for (i, t) in id_to_token.iter().enumerate() {
        token_to_id.insert(t.clone(), i as u32);
    }
    for c in &chars {
        let s = c.to_string();
        token_to_id.insert(s.clone(), id_to_token.len() as u32);
        id_to_token.push(s);
    }

    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(text, n)| {
            let syms = text.chars().map(|c| token_to_id[&c.to_string()]).collect();
            (syms, n)
        })
        .collect();

    let mut merges = Vec::new();
    while id_to_token.len() < target_vocab_size {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let key = |p: &(u32, u32)| {
                    let (l, r) = (&id_to_token[p.0 as usize], &id_to_token[p.1 as usize]);
                    (format!("{l}{r}"), l.clone())
                };
                // smaller key wins the tie, so reverse for max_by
                key(pb).cmp(&key(pa))
            })
        });
        let Some(((left, right), _)) = best else {
            return Err(Error::VocabUnreachable {
                requested: target_vocab_size,
                reached: id_to_token.len(),
            });
        };
        let (ls, rs) = (id_to_token[left as usize].clone(), id_to_token[right as usize].clone());
        let merged_str = format!("{ls}{rs}");
        let merged = match token_to_id.get(&merged_str) {
            Some(&id) => id,
            None => {
                let id = id_to_token.len() as u32;
                token_to_id.insert(merged_str.clone(), id);
                id_to_token.push(merged_str);
                id
            }
        };
        merges.push((ls, rs));
        for (syms, _) in &mut words {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    Vocab::from_parts(merges, id_to_token)
}

/// Removes a leading SOS and everything from the first EOS on.
pub fn strip_special(ids: &[u32]) -> &[u32] {
    let start = usize::from(ids.first() == Some(&SOS_ID));
    let end = ids[start..]
        .iter()
        .position(|&t| t == EOS_ID)
        .map_or(ids.len(), |p| start + p);
    &ids[start..end]
}

/// Checks the `SOS … EOS` shape with a single trailing EOS.
pub fn validate_complete(ids: &[u32]) -> Result<()> {
    if ids.len() < 2 || ids[0] != SOS_ID || *ids.last().unwrap() != EOS_ID {
        return Err(Error::MalformedSequence(
            "caption must start with SOS and end with EOS".into(),
        ));
    }
    if ids[..ids.len() - 1].contains(&EOS_ID) {
        return Err(Error::MalformedSequence("EOS before end of caption".into()));
    }
    Ok(())
}

/// Checks a decoding prefix: starts with SOS, no EOS.
pub fn validate_prefix(ids: &[u32]) -> Result<()> {
    if ids.first() != Some(&SOS_ID) {
        return Err(Error::MalformedSequence("prefix must start with SOS".into()));
    }
    if ids.contains(&EOS_ID) {
        return Err(Error::MalformedSequence("prefix contains EOS".into()));
    }
    Ok(())
}
