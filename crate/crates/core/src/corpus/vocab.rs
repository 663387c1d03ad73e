use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// Clause separator, rendered as ".".
pub const SEP: TokenId = 3;
/// The function word "has" that only appears in documents.
pub const HAS: TokenId = 4;
const RESERVED: u32 = 5;

/// What a token id stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Sep,
    Has,
    Entity(u32),
    Attribute(u32),
    Value(u32),
    Unknown,
}

/// Fixed layout vocabulary: reserved ids, then entities, attributes, values.
///
/// | id range | token |
/// |---|---|
/// | 0 | `<pad>` |
/// | 1 | `<bos>` |
/// | 2 | `<eos>` |
/// | 3 | `.` |
/// | 4 | `has` |
/// | 5 .. 5+Ne | `E0` .. |
/// | .. +Na | `A0` .. |
/// | .. +Nv | `V0` .. |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    n_entities: u32,
    n_attributes: u32,
    n_values: u32,
}

impl Vocab {
    pub fn new(n_entities: u32, n_attributes: u32, n_values: u32) -> Result<Self> {
        if n_entities < 1 || n_attributes < 1 || n_values < 1 {
            return Err(Error::InvalidConfig(
                "entity, attribute and value vocabularies need at least one symbol".into(),
            ));
        }
        Ok(Self {
            n_entities,
            n_attributes,
            n_values,
        })
    }

    pub fn size(&self) -> usize {
        (RESERVED + self.n_entities + self.n_attributes + self.n_values) as usize
    }

    pub fn n_entities(&self) -> u32 {
        self.n_entities
    }

    pub fn n_attributes(&self) -> u32 {
        self.n_attributes
    }

    pub fn n_values(&self) -> u32 {
        self.n_values
    }

    pub fn entity(&self, e: u32) -> TokenId {
        debug_assert!(e < self.n_entities);
        RESERVED + e
    }

    pub fn attribute(&self, a: u32) -> TokenId {
        debug_assert!(a < self.n_attributes);
        RESERVED + self.n_entities + a
    }

    pub fn value(&self, v: u32) -> TokenId {
        debug_assert!(v < self.n_values);
        RESERVED + self.n_entities + self.n_attributes + v
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        let ent0 = RESERVED;
        let att0 = ent0 + self.n_entities;
        let val0 = att0 + self.n_attributes;
        let end = val0 + self.n_values;
        match id {
            PAD => TokenKind::Pad,
            BOS => TokenKind::Bos,
            EOS => TokenKind::Eos,
            SEP => TokenKind::Sep,
            HAS => TokenKind::Has,
            id if id < att0 => TokenKind::Entity(id - ent0),
            id if id < val0 => TokenKind::Attribute(id - att0),
            id if id < end => TokenKind::Value(id - val0),
            _ => TokenKind::Unknown,
        }
    }

    pub fn token_str(&self, id: TokenId) -> String {
        match self.kind(id) {
            TokenKind::Pad => "<pad>".into(),
            TokenKind::Bos => "<bos>".into(),
            TokenKind::Eos => "<eos>".into(),
            TokenKind::Sep => ".".into(),
            TokenKind::Has => "has".into(),
            TokenKind::Entity(e) => format!("E{e}"),
            TokenKind::Attribute(a) => format!("A{a}"),
            TokenKind::Value(v) => format!("V{v}"),
            TokenKind::Unknown => format!("<unk:{id}>"),
        }
    }

    pub fn lookup(&self, s: &str) -> Option<TokenId> {
        let parse = |rest: &str, n: u32| rest.parse::<u32>().ok().filter(|&i| i < n);
        match s {
            "<pad>" => Some(PAD),
            "<bos>" => Some(BOS),
            "<eos>" => Some(EOS),
            "." => Some(SEP),
            "has" => Some(HAS),
            _ => {
                if let Some(r) = s.strip_prefix('E') {
                    parse(r, self.n_entities).map(|i| self.entity(i))
                } else if let Some(r) = s.strip_prefix('A') {
                    parse(r, self.n_attributes).map(|i| self.attribute(i))
                } else if let Some(r) = s.strip_prefix('V') {
                    parse(r, self.n_values).map(|i| self.value(i))
                } else {
                    None
                }
            }
        }
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.token_str(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses whitespace-separated token strings.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.lookup(w)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown token {w:?}")))
            })
            .collect()
    }

    /// Token-per-line file; the id of a token is its zero-based line number.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for id in 0..self.size() as TokenId {
            writeln!(f, "{}", self.token_str(id))?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a vocab file written by [`Vocab::write_to`], checking the layout.
    pub fn read_from(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let lines: Vec<String> = f.lines().collect::<std::io::Result<_>>()?;
        let count = |prefix: char| {
            lines
                .iter()
                .filter(|l| l.starts_with(prefix) && l[1..].parse::<u32>().is_ok())
                .count() as u32
        };
        let vocab = Vocab::new(count('E'), count('A'), count('V'))
            .map_err(|_| Error::CorruptFile(format!("{}: empty vocabulary section", path.display())))?;
        if lines.len() != vocab.size()
            || lines
                .iter()
                .enumerate()
                .any(|(i, l)| vocab.token_str(i as TokenId) != *l)
        {
            return Err(Error::CorruptFile(format!(
                "{}: token layout does not match the fixed vocabulary order",
                path.display()
            )));
        }
        Ok(vocab)
    }
}
