use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Index into the embedding table. Token 0 is the null (empty) condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub u16);

impl Token {
    pub const NULL: Token = Token(0);

    pub fn is_null(self) -> bool {
        self == Self::NULL
    }
}

/// Ordered token sequence of length 1..=2.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Condition(Vec<Token>);

pub const MAX_TOKENS: usize = 2;

impl Condition {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > MAX_TOKENS {
            return Err(Error::InvalidCondition(format!(
                "needs 1..={MAX_TOKENS} tokens, got {}",
                tokens.len()
            )));
        }
        if tokens.len() > 1 && tokens.iter().any(|t| t.is_null()) {
            return Err(Error::InvalidCondition("null token inside a multi-token condition".into()));
        }
        Ok(Self(tokens))
    }

    pub fn null() -> Self {
        Self(vec![Token::NULL])
    }

    pub fn single(token: u16) -> Self {
        Self(vec![Token(token)])
    }

    pub fn pair(a: u16, b: u16) -> Result<Self> {
        Self::new(vec![Token(a), Token(b)])
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_null(&self) -> bool {
        self.0 == [Token::NULL]
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| t.0.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for Condition {
    type Err = Error;

    /// `"3"` or `"1+2"`.
    fn from_str(s: &str) -> Result<Self> {
        let tokens = s
            .split('+')
            .map(|p| {
                p.trim()
                    .parse::<u16>()
                    .map(Token)
                    .map_err(|_| Error::InvalidCondition(format!("bad token {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens)
    }
}

/// Concepts `1..=concepts` with anchors evenly spaced on a circle.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVocabulary {
    concepts: usize,
    radius: f64,
}

impl ConditionVocabulary {
    pub fn new(concepts: usize, radius: f64) -> Result<Self> {
        if concepts == 0 || concepts >= u16::MAX as usize {
            return Err(Error::InvalidCondition(format!("vocabulary of {concepts} concepts")));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidCondition(format!("anchor radius {radius}")));
        }
        Ok(Self { concepts, radius })
    }

    pub fn concepts(&self) -> usize {
        self.concepts
    }

    /// Embedding rows, including the null row.
    pub fn table_rows(&self) -> usize {
        self.concepts + 1
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Anchor of a concept token; `None` for the null token or unknown tokens.
    pub fn anchor(&self, token: Token) -> Option<[f64; 2]> {
        let k = token.0 as usize;
        if k == 0 || k > self.concepts {
            return None;
        }
        let angle = 2.0 * std::f64::consts::PI * (k - 1) as f64 / self.concepts as f64;
        Some([self.radius * angle.cos(), self.radius * angle.sin()])
    }

    /// Checks every token is known. Null is allowed only on its own.
    pub fn validate(&self, c: &Condition) -> Result<()> {
        for t in c.tokens() {
            if t.0 as usize > self.concepts {
                return Err(Error::InvalidCondition(format!(
                    "token {} outside vocabulary of {} concepts",
                    t.0, self.concepts
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["3", "1+2", "0"] {
            assert_eq!(s.parse::<Condition>().unwrap().to_string(), s);
        }
        assert!("".parse::<Condition>().is_err());
        assert!("1+2+3".parse::<Condition>().is_err());
        assert!("0+2".parse::<Condition>().is_err());
        assert!("x".parse::<Condition>().is_err());
    }

    #[test]
    fn anchors_on_circle() {
        let v = ConditionVocabulary::new(8, 400.0).unwrap();
        assert_eq!(v.anchor(Token(1)), Some([400.0, 0.0]));
        assert!(v.anchor(Token::NULL).is_none());
        assert!(v.anchor(Token(9)).is_none());
        let [x, y] = v.anchor(Token(3)).unwrap();
        assert!(x.abs() < 1e-9 && (y - 400.0).abs() < 1e-9);
        assert!(v.validate(&Condition::single(9)).is_err());
    }
}
