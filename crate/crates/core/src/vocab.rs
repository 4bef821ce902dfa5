//! Token alphabet layout.
//!
//! Ids `0..content_size` are ordinary tokens. The remaining three ids are
//! reserved and laid out as:
//!
//! ```text
//! content_size      EOS   (last entry of the prediction support)
//! content_size + 1  MASK  (absorbing state, never predicted)
//! content_size + 2  PAD   (stored corpora only, never in a live window)
//! ```
//!
//! Denoisers emit distributions over the `content_size + 1` ids of the
//! prediction support; MASK and PAD have no column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    content_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl VocabSpec {
    pub fn new(content_size: usize) -> Result<Self> {
        if content_size == 0 {
            return Err(Error::config("vocabulary needs at least one content token"));
        }
        Ok(Self {
            content_size,
            names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.content_size {
            return Err(Error::config(format!(
                "{} token names for {} content tokens",
                names.len(),
                self.content_size
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    /// Number of ordinary (non-reserved) tokens.
    pub fn content_size(&self) -> usize {
        self.content_size
    }

    /// Width of a prediction row: content tokens plus EOS.
    pub fn support_size(&self) -> usize {
        self.content_size + 1
    }

    /// Every id that may appear anywhere, including MASK and PAD.
    pub fn alphabet_size(&self) -> usize {
        self.content_size + 3
    }

    pub fn eos(&self) -> TokenId {
        self.content_size as TokenId
    }

    pub fn mask(&self) -> TokenId {
        self.content_size as TokenId + 1
    }

    pub fn pad(&self) -> TokenId {
        self.content_size as TokenId + 2
    }

    pub fn is_content(&self, tok: TokenId) -> bool {
        (tok as usize) < self.content_size
    }

    pub fn in_support(&self, tok: TokenId) -> bool {
        (tok as usize) < self.support_size()
    }

    pub fn name(&self, tok: TokenId) -> String {
        if tok == self.eos() {
            return "<eos>".into();
        }
        if tok == self.mask() {
            return "<mask>".into();
        }
        if tok == self.pad() {
            return "<pad>".into();
        }
        match &self.names {
            Some(names) if (tok as usize) < names.len() => names[tok as usize].clone(),
            _ => format!("t{tok}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_follow_content() {
        let v = VocabSpec::new(10).unwrap();
        assert_eq!(v.eos(), 10);
        assert_eq!(v.mask(), 11);
        assert_eq!(v.pad(), 12);
        assert_eq!(v.support_size(), 11);
        assert_eq!(v.alphabet_size(), 13);
        assert!(v.in_support(v.eos()));
        assert!(!v.in_support(v.mask()));
        assert!(!v.is_content(v.eos()));
        assert_ne!(v.pad(), v.eos());
        assert_ne!(v.pad(), v.mask());
    }

    #[test]
    fn empty_vocab_rejected() {
        assert!(VocabSpec::new(0).is_err());
    }

    #[test]
    fn names_must_cover_content() {
        let v = VocabSpec::new(2).unwrap();
        assert!(v.clone().with_names(vec!["a".into()]).is_err());
        let v = v.with_names(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.name(1), "b");
        assert_eq!(v.name(2), "<eos>");
    }
}
