//! Token counting used for length thresholds and statistics.

/// Splits text into tokens. Implementations must be deterministic.
pub trait Tokenizer: Send + Sync {
    fn tokens<'a>(&self, text: &'a str) -> Vec<&'a str>;

    fn count(&self, text: &str) -> usize {
        self.tokens(text).len()
    }
}

/// Unicode whitespace splitting; the default everywhere in the toolkit.
#[derive(Debug, Clone, Copy, Default)]
pub struct Whitespace;

impl Tokenizer for Whitespace {
    fn tokens<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split_whitespace().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_counts() {
        assert_eq!(Whitespace.count("  one does\tnot\nsimply "), 4);
        assert_eq!(Whitespace.count(""), 0);
    }
}
