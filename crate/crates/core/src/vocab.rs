//! Character vocabulary and the reserved blank / sos / eos ids.
//!
//! Ids are dense: blank is 0, characters are `1..=n`, eos is `n + 1` and sos
//! is `n + 2`. Each head sees its own slice of that id space:
//!
//! | head              | entries        | index of label `l`   |
//! |-------------------|----------------|----------------------|
//! | CTC posteriors    | blank ∪ U      | `l`                  |
//! | decoder/LM output | U ∪ eos        | `l − 1`              |
//! | decoder/LM input  | U ∪ sos        | `l − 1`, sos → `n`   |

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(pub u32);

impl Label {
    pub const BLANK: Label = Label(0);

    pub fn id(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub type LabelSequence = Vec<Label>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::Config("vocabulary must contain at least one character".into()));
        }
        let mut seen = HashSet::new();
        if let Some(c) = chars.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::Config(format!("duplicate vocabulary character {c:?}")));
        }
        Ok(Self { chars })
    }

    /// `n` consecutive lowercase letters starting at `a`.
    pub fn letters(n: usize) -> Result<Self> {
        if n == 0 || n > 26 {
            return Err(Error::Config(format!("letter vocabulary size {n} not in 1..=26")));
        }
        Self::new(('a'..='z').take(n).collect())
    }

    /// Number of characters `|U|`.
    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn blank(&self) -> Label {
        Label::BLANK
    }

    pub fn eos(&self) -> Label {
        Label(self.chars.len() as u32 + 1)
    }

    pub fn sos(&self) -> Label {
        Label(self.chars.len() as u32 + 2)
    }

    pub fn chars(&self) -> impl Iterator<Item = Label> {
        (1..=self.chars.len() as u32).map(Label)
    }

    pub fn is_char(&self, l: Label) -> bool {
        (1..=self.chars.len()).contains(&l.id())
    }

    /// Width of the CTC posterior rows, `|U| + 1`.
    pub fn ctc_dim(&self) -> usize {
        self.chars.len() + 1
    }

    /// Width of decoder and LM output distributions, `|U ∪ {eos}|`.
    pub fn out_dim(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn in_dim(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn out_index(&self, l: Label) -> Result<usize> {
        if self.is_char(l) || l == self.eos() {
            Ok(l.id() - 1)
        } else {
            Err(Error::InvalidLabel {
                id: l.id(),
                context: "decoder output",
            })
        }
    }

    pub fn out_label(&self, index: usize) -> Label {
        debug_assert!(index < self.out_dim());
        Label(index as u32 + 1)
    }

    pub fn in_index(&self, l: Label) -> Result<usize> {
        if self.is_char(l) {
            Ok(l.id() - 1)
        } else if l == self.sos() {
            Ok(self.chars.len())
        } else {
            Err(Error::InvalidLabel {
                id: l.id(),
                context: "decoder input",
            })
        }
    }

    pub fn check_target(&self, target: &[Label]) -> Result<()> {
        match target.iter().find(|l| !self.is_char(**l)) {
            Some(l) => Err(Error::InvalidLabel {
                id: l.id(),
                context: "target sequence",
            }),
            None => Ok(()),
        }
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|x| *x == c)
                    .map(|i| Label(i as u32 + 1))
                    .ok_or_else(|| Error::Config(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Renders characters; reserved ids become `<blank>`, `<eos>`, `<sos>`.
    pub fn decode(&self, labels: &[Label]) -> String {
        let mut s = String::new();
        for &l in labels {
            if self.is_char(l) {
                s.push(self.chars[l.id() - 1]);
            } else if l == Label::BLANK {
                s.push_str("<blank>");
            } else if l == self.eos() {
                s.push_str("<eos>");
            } else {
                s.push_str("<sos>");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_outside_chars() {
        let v = Vocab::letters(3).unwrap();
        assert_eq!(v.blank(), Label(0));
        assert_eq!(v.eos(), Label(4));
        assert_eq!(v.sos(), Label(5));
        assert!(!v.is_char(v.blank()) && !v.is_char(v.eos()) && !v.is_char(v.sos()));
        assert_eq!(v.out_index(v.eos()).unwrap(), 3);
        assert_eq!(v.in_index(v.sos()).unwrap(), 3);
        assert!(v.out_index(v.sos()).is_err());
        assert!(v.in_index(v.eos()).is_err());
        assert!(v.out_index(v.blank()).is_err());
    }

    #[test]
    fn text_round_trip() {
        let v = Vocab::letters(5).unwrap();
        let l = v.encode("badce").unwrap();
        assert_eq!(v.decode(&l), "badce");
        assert!(v.encode("z").is_err());
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocab::new(vec!['a', 'b', 'a']).is_err());
        assert!(Vocab::new(vec![]).is_err());
    }
}
