//! Glob patterns over slash-separated parameter paths.
//!
//! A pattern is a list of segments. `**` matches any number of path
//! segments (including none). Any other segment matches exactly one path
//! segment, where `*` inside it matches any run of characters, so `*` alone
//! matches any single segment and `*layer_norm` matches `final_layer_norm`.

use crate::error::{Error, Result};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    source: String,
    segments: Vec<String>,
}

impl Pattern {
    pub fn parse(source: &str) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Config("empty path pattern".into()));
        }
        let segments: Vec<String> = source.split('/').map(str::to_owned).collect();
        for seg in &segments {
            if seg.is_empty() {
                return Err(Error::Config(format!("empty segment in pattern `{source}`")));
            }
            if seg.contains("**") && seg != "**" {
                return Err(Error::Config(format!(
                    "`**` must be a whole segment in pattern `{source}`"
                )));
            }
        }
        Ok(Pattern {
            source: source.to_owned(),
            segments,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn matches(&self, path: &str) -> bool {
        let parts: Vec<&str> = path.split('/').collect();
        match_segments(&self.segments, &parts)
    }
}

fn match_segments(pat: &[String], path: &[&str]) -> bool {
    match pat.split_first() {
        None => path.is_empty(),
        Some((head, rest)) if head == "**" => {
            (0..=path.len()).any(|skip| match_segments(rest, &path[skip..]))
        }
        Some((head, rest)) => match path.split_first() {
            Some((seg, tail)) => glob_segment(head.as_bytes(), seg.as_bytes()) && match_segments(rest, tail),
            None => false,
        },
    }
}

fn glob_segment(pat: &[u8], s: &[u8]) -> bool {
    match pat.split_first() {
        None => s.is_empty(),
        Some((b'*', rest)) => (0..=s.len()).any(|i| glob_segment(rest, &s[i..])),
        Some((c, rest)) => s.first() == Some(c) && glob_segment(rest, &s[1..]),
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::parse(s)
    }
}

impl Serialize for Pattern {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Pattern::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(p: &str, path: &str) -> bool {
        Pattern::parse(p).unwrap().matches(path)
    }

    #[test]
    fn single_and_deep_wildcards() {
        assert!(m("encoder/*/fc1/weight", "encoder/layer3/fc1/weight"));
        assert!(!m("encoder/*/weight", "encoder/layer3/fc1/weight"));
        assert!(m("encoder/**", "encoder/layer3/fc1/weight"));
        assert!(m("**", "a"));
        assert!(m("**/bias", "bias"));
        assert!(m("**/*layer_norm/*", "decoder/layer0/encoder_attn_layer_norm/bias"));
        assert!(!m("**/*layer_norm/*", "decoder/layer0/encoder_attn/q_proj/bias"));
        assert!(m("decoder/layer*/self_attn/**", "decoder/layer11/self_attn/q_proj/weight"));
        assert!(!m("decoder/layer1/**", "decoder/layer11/fc1/weight"));
    }

    #[test]
    fn rejects_malformed() {
        assert!(Pattern::parse("").is_err());
        assert!(Pattern::parse("a//b").is_err());
        assert!(Pattern::parse("a/b**").is_err());
    }

    #[test]
    fn serde_as_string() {
        let p = Pattern::parse("encoder/**").unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "\"encoder/**\"");
        assert_eq!(serde_json::from_str::<Pattern>(&s).unwrap(), p);
    }
}
