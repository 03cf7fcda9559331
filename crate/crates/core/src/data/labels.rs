//! Soft labels derived from expert votes.

use crate::error::{Error, Result};
use crate::losses::SoftLabel;

/// Majority and minority classes from one to three votes.
///
/// Unanimous votes (or a single vote) give a consensus label; two agreeing votes
/// out of three give `c1` = the pair's class and `c2` = the dissenter. Votes
/// without a majority (three distinct classes, or two that differ) yield `None`,
/// meaning the crop is excluded.
pub fn derive_soft_label(votes: &[usize], lambda: f64) -> Result<Option<SoftLabel>> {
    match *votes {
        [a] => Ok(Some(SoftLabel::new(a, a, true, lambda)?)),
        [a, b] if a == b => Ok(Some(SoftLabel::new(a, a, true, lambda)?)),
        [_, _] => Ok(None),
        [a, b, c] => {
            let label = if a == b && b == c {
                SoftLabel::new(a, a, true, lambda)?
            } else if a == b {
                SoftLabel::new(a, c, false, lambda)?
            } else if a == c {
                SoftLabel::new(a, b, false, lambda)?
            } else if b == c {
                SoftLabel::new(b, a, false, lambda)?
            } else {
                return Ok(None);
            };
            Ok(Some(label))
        }
        _ => Err(Error::Label(format!(
            "expected 1 to 3 votes, got {}",
            votes.len()
        ))),
    }
}
