//! Token alphabet with the absorbing mask symbol and sequence specials.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK: &str = "[X]";
pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";

/// The 20 canonical amino acids, in the conventional one-letter order.
pub const AMINO_ACIDS: [&str; 20] = [
    "A", "C", "D", "E", "F", "G", "H", "I", "K", "L", "M", "N", "P", "Q", "R", "S", "T", "V",
    "W", "Y",
];

/// Character used for the mask symbol in FASTA text.
pub const MASK_CHAR: char = 'X';

/// What to do with residue letters that are not in the alphabet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnknownPolicy {
    #[default]
    Reject,
    MapToX,
}

/// Dense, bijective map between symbols and token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    mask_id: usize,
    pad_id: usize,
    bos_id: usize,
    eos_id: usize,
    data_ids: Vec<usize>,
}

impl Vocab {
    /// Builds a vocabulary from `alphabet`, appending any missing specials.
    pub fn new<S: AsRef<str>>(alphabet: &[S]) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::EmptyAlphabet);
        }
        let mut symbols: Vec<String> = Vec::with_capacity(alphabet.len() + 4);
        let mut index = HashMap::new();
        for s in alphabet {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::InvalidInput("empty symbol".into()));
            }
            if index.insert(s.to_string(), symbols.len()).is_some() {
                return Err(Error::DuplicateSymbol(s.to_string()));
            }
            symbols.push(s.to_string());
        }
        for special in [MASK, PAD, BOS, EOS] {
            if !index.contains_key(special) {
                index.insert(special.to_string(), symbols.len());
                symbols.push(special.to_string());
            }
        }
        let mask_id = index[MASK];
        let pad_id = index[PAD];
        let bos_id = index[BOS];
        let eos_id = index[EOS];
        let data_ids: Vec<usize> = (0..symbols.len())
            .filter(|&i| ![mask_id, pad_id, bos_id, eos_id].contains(&i))
            .collect();
        if data_ids.is_empty() {
            return Err(Error::InvalidInput("alphabet has no data symbols".into()));
        }
        Ok(Self {
            symbols,
            index,
            mask_id,
            pad_id,
            bos_id,
            eos_id,
            data_ids,
        })
    }

    /// The default protein vocabulary: 20 amino acids plus 4 specials.
    pub fn amino_acids() -> Self {
        Self::new(&AMINO_ACIDS).expect("canonical alphabet is valid")
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn bos_id(&self) -> usize {
        self.bos_id
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    /// Ids of the real (diffusable, sampleable) tokens.
    pub fn data_ids(&self) -> &[usize] {
        &self.data_ids
    }

    pub fn num_data(&self) -> usize {
        self.data_ids.len()
    }

    /// `[PAD]`, `[BOS]` and `[EOS]`; the mask is tracked separately.
    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad_id || id == self.bos_id || id == self.eos_id
    }

    pub fn is_data(&self, id: usize) -> bool {
        id < self.size() && id != self.mask_id && !self.is_special(id)
    }

    /// Boolean mask over the vocabulary selecting data tokens.
    pub fn data_support(&self) -> Vec<bool> {
        (0..self.size()).map(|i| self.is_data(i)).collect()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Maps one residue character. `X` is the mask.
    pub fn encode_char(&self, c: char, policy: UnknownPolicy) -> Option<usize> {
        let c = c.to_ascii_uppercase();
        if c == MASK_CHAR {
            return Some(self.mask_id);
        }
        let mut buf = [0u8; 4];
        match self.index.get(&*c.encode_utf8(&mut buf)) {
            Some(&id) => Some(id),
            None => match policy {
                UnknownPolicy::Reject => None,
                UnknownPolicy::MapToX => Some(self.mask_id),
            },
        }
    }

    /// Encodes a residue string; fails on the first unknown letter under
    /// [`UnknownPolicy::Reject`].
    pub fn encode(&self, text: &str, policy: UnknownPolicy) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(pos, c)| {
                self.encode_char(c, policy).ok_or_else(|| {
                    Error::InvalidInput(format!("illegal residue {c:?} at column {}", pos + 1))
                })
            })
            .collect()
    }

    /// Renders ids as one character per token, the mask as `X`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| {
                if id == self.mask_id {
                    MASK_CHAR.to_string()
                } else {
                    self.symbols[id].clone()
                }
            })
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        Vocab::new(&symbols)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.symbols
    }
}
