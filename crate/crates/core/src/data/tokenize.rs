use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

/// Tokenizer switches. The defaults lowercase and keep the final sigma as
/// produced by lowercasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerOptions {
    pub lowercase: bool,
    /// Map final sigma `ς` to `σ` so both spellings share one token.
    pub fold_final_sigma: bool,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        TokenizerOptions {
            lowercase: true,
            fold_final_sigma: false,
        }
    }
}

fn is_punctuation(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// NFC-normalizes, splits on whitespace, strips leading and trailing
/// punctuation from every token, lowercases, and drops empty tokens.
pub fn tokenize(sentence: &str) -> Vec<String> {
    tokenize_with(sentence, TokenizerOptions::default())
}

pub fn tokenize_with(sentence: &str, opts: TokenizerOptions) -> Vec<String> {
    let normalized: String = sentence.nfc().collect();
    normalized
        .split_whitespace()
        .filter_map(|raw| {
            let mut tok = raw.trim_matches(is_punctuation).to_string();
            if opts.lowercase {
                // lowercasing can denormalize (e.g. dotted capital I); renormalize
                tok = tok.to_lowercase().nfc().collect();
            }
            if opts.fold_final_sigma {
                tok = tok.replace('ς', "σ");
            }
            // case mapping may expose punctuation or whitespace at the edges
            let tok = tok.trim_matches(|c: char| is_punctuation(c) || c.is_whitespace());
            (!tok.is_empty() && !tok.contains(char::is_whitespace)).then(|| tok.to_string())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn greek_sentence_with_trailing_stop() {
        assert_eq!(tokenize("Πατάει πόδι."), vec!["πατάει", "πόδι"]);
        assert!(tokenize("").is_empty());
        assert!(tokenize(" ... ; ").is_empty());
    }

    #[test]
    fn strips_only_the_edges() {
        assert_eq!(tokenize("«Λέει» κ.λπ. don't"), vec!["λέει", "κ.λπ", "don't"]);
    }

    #[test]
    fn composes_decomposed_accents() {
        // α + combining acute → ά
        assert_eq!(tokenize("πα\u{301}ει"), vec!["πάει"]);
    }

    #[test]
    fn final_sigma_toggle() {
        let opts = TokenizerOptions { fold_final_sigma: true, ..Default::default() };
        assert_eq!(tokenize("ΔΡΟΜΟΣ"), vec!["δρομος"]);
        assert_eq!(tokenize_with("ΔΡΟΜΟΣ", opts), vec!["δρομοσ"]);
    }

    proptest! {
        #[test]
        fn tokenize_is_a_fixpoint(s in "\\PC{0,40}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn tokens_are_clean(s in "[\\PC\\s.,;!?«»'\"-]{0,40}") {
            for t in tokenize(&s) {
                prop_assert!(!t.is_empty());
                let first = t.chars().next().unwrap();
                let last = t.chars().last().unwrap();
                prop_assert!(!is_punctuation(first) && !is_punctuation(last), "{:?}", t);
            }
        }
    }
}
