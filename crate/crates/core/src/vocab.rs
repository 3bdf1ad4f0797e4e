//! Character vocabulary: a bijection between characters and dense ids.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary character {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    /// Vocabulary of all distinct characters in `text`, in order of first appearance.
    pub fn from_text(text: &str, filter: &CharFilter) -> Self {
        let mut chars = Vec::new();
        let mut index = HashMap::new();
        for c in text.chars().filter(|&c| filter.keeps(c)) {
            index.entry(c).or_insert_with(|| {
                chars.push(c);
                (chars.len() - 1) as u32
            });
        }
        Self { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn char(&self, id: u32) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Map text to ids, dropping filtered characters. Characters outside the
    /// vocabulary are an error.
    pub fn encode(&self, text: &str, filter: &CharFilter) -> Result<Vec<u32>> {
        text.chars()
            .filter(|&c| filter.keeps(c))
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Data(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.char(i).unwrap_or('\u{fffd}'))
            .collect()
    }
}

/// Character-class filter applied to raw text before counting.
#[derive(Debug, Clone)]
pub struct CharFilter {
    pub strip_punctuation: bool,
    pub strip_whitespace: bool,
    pub extra: Vec<char>,
}

impl Default for CharFilter {
    fn default() -> Self {
        Self {
            strip_punctuation: true,
            strip_whitespace: false,
            extra: Vec::new(),
        }
    }
}

/// Common full-width and CJK punctuation not covered by the ASCII class.
const WIDE_PUNCTUATION: &str = "，。、；：？！“”‘’（）《》〈〉【】「」『』—…·～";

impl CharFilter {
    pub fn keep_all() -> Self {
        Self {
            strip_punctuation: false,
            strip_whitespace: false,
            extra: Vec::new(),
        }
    }

    pub fn keeps(&self, c: char) -> bool {
        if c.is_control() {
            return false;
        }
        if self.strip_whitespace && c.is_whitespace() {
            return false;
        }
        if self.strip_punctuation && (c.is_ascii_punctuation() || WIDE_PUNCTUATION.contains(c)) {
            return false;
        }
        !self.extra.contains(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_text_strips_punctuation() {
        let v = Vocab::from_text("ab, ba!。c", &CharFilter::default());
        assert_eq!(v.chars(), &['a', 'b', ' ', 'c']);
        assert_eq!(v.encode("a,b", &CharFilter::default()).unwrap(), vec![0, 1]);
        assert!(v.encode("z", &CharFilter::default()).is_err());
        assert_eq!(v.decode(&[3, 0]), "ca");
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocab::new(vec!['a', 'a']).is_err());
    }
}
