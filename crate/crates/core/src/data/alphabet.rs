//! The 37-symbol recognition alphabet.

/// Number of classes, blank included.
pub const NUM_CLASSES: usize = 37;
/// Class index of the blank symbol.
pub const BLANK: usize = 0;

const SYMBOLS: &[u8; 36] = b"0123456789abcdefghijklmnopqrstuvwxyz";

/// Blank at index 0, then digits, then lowercase letters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Alphabet;

impl Alphabet {
    pub const fn len(self) -> usize {
        NUM_CLASSES
    }

    pub const fn is_empty(self) -> bool {
        false
    }

    /// Class index of `c`; uppercase folds to lowercase, anything else is blank.
    pub fn index(self, c: char) -> usize {
        let c = c.to_ascii_lowercase();
        match c {
            '0'..='9' => 1 + (c as usize - '0' as usize),
            'a'..='z' => 11 + (c as usize - 'a' as usize),
            _ => BLANK,
        }
    }

    /// Symbol of class `i`, `None` for blank or out of range.
    pub fn symbol(self, i: usize) -> Option<char> {
        (1..NUM_CLASSES).contains(&i).then(|| SYMBOLS[i - 1] as char)
    }

    /// Lowercased label where every character is in the alphabet, or `None`.
    pub fn normalize(self, label: &str) -> Option<String> {
        label
            .chars()
            .map(|c| (self.index(c) != BLANK).then(|| c.to_ascii_lowercase()))
            .collect()
    }

    pub fn symbols(self) -> impl Iterator<Item = char> {
        SYMBOLS.iter().map(|&b| b as char)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let a = Alphabet;
        assert_eq!(a.len(), 37);
        assert_eq!(a.index('0'), 1);
        assert_eq!(a.index('9'), 10);
        assert_eq!(a.index('a'), 11);
        assert_eq!(a.index('Z'), 36);
        assert_eq!(a.index('-'), BLANK);
        assert_eq!(a.index('é'), BLANK);
        assert_eq!(a.symbol(0), None);
        assert_eq!(a.symbol(37), None);
        for (i, c) in a.symbols().enumerate() {
            assert_eq!(a.index(c), i + 1);
            assert_eq!(a.symbol(i + 1), Some(c));
        }
        assert_eq!(a.normalize("AbC9").as_deref(), Some("abc9"));
        assert_eq!(a.normalize("a b"), None);
    }
}
