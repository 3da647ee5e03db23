use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<eos>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    min_freq: usize,
}

impl Vocabulary {
    /// Tokens seen at least `min_freq` times get ids from 3 upward, ordered by
    /// descending frequency, then by first occurrence.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Self {
        let min_freq = min_freq.max(1);
        // token -> (count, first position)
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut pos = 0;
        for sentence in corpus {
            for tok in sentence {
                let e = stats.entry(tok.as_ref()).or_insert((0, pos));
                e.0 += 1;
                pos += 1;
            }
        }
        let mut kept: Vec<(&str, usize, usize)> = stats
            .into_iter()
            .filter(|(_, (c, _))| *c >= min_freq)
            .map(|(t, (c, p))| (t, c, p))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens, min_freq).expect("specials are first")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(id_to_token: Vec<String>, min_freq: usize) -> Result<Self> {
        if id_to_token.len() < 3 || id_to_token[..3] != SPECIALS {
            return Err(Error::Dataset("vocabulary must start with <pad>, <unk>, <eos>".into()));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate().skip(3) {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Dataset(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str, min_freq: usize) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect(), min_freq)
    }
}

/// Caption as padded token ids; `ids[length - 1]` is always EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedCaption {
    pub ids: Vec<usize>,
    pub length: usize,
    pub raw: String,
}

impl TokenizedCaption {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of word tokens (EOS excluded).
    pub fn num_words(&self) -> usize {
        self.length - 1
    }

    /// Same caption padded out to `max_len` (never truncates).
    pub fn padded_to(&self, max_len: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.resize(max_len.max(self.ids.len()), PAD);
        TokenizedCaption {
            ids,
            length: self.length,
            raw: self.raw.clone(),
        }
    }
}

/// Maps tokens to ids (unknown → UNK), keeps the first `max_len − 1`, appends
/// EOS and pads with PAD to `max_len`.
pub fn encode_caption<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S], max_len: usize) -> Result<TokenizedCaption> {
    if max_len < 2 {
        return Err(Error::Dataset(format!("max_len must be at least 2, got {max_len}")));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let kept = tokens.len().min(max_len - 1);
    let mut ids: Vec<usize> = tokens[..kept].iter().map(|t| vocab.id(t.as_ref())).collect();
    ids.push(EOS);
    let length = ids.len();
    ids.resize(max_len, PAD);
    let raw = tokens.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" ");
    Ok(TokenizedCaption { ids, length, raw })
}

/// Word tokens of a caption (EOS and padding dropped).
pub fn decode_caption(vocab: &Vocabulary, caption: &TokenizedCaption) -> Vec<String> {
    caption.ids[..caption.num_words()]
        .iter()
        .map(|&i| vocab.token(i).unwrap_or("<unk>").to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = Vocabulary::build::<String>(&[], 1);
        assert_eq!(v.len(), 3);
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "<eos>"]);
    }

    #[test]
    fn ordering_rule() {
        let v = Vocabulary::build(&[vec!["ক", "ক", "খ"]], 1);
        assert_eq!(v.id("ক"), 3);
        assert_eq!(v.id("খ"), 4);
        let w = Vocabulary::build(&[vec!["খ", "ক"], vec!["ক", "গ"]], 1);
        assert_eq!(w.tokens()[3..], ["ক", "খ", "গ"]);
        let x = Vocabulary::build(&[vec!["খ", "ক"], vec!["ক", "গ"]], 2);
        assert_eq!(x.len(), 4);
        assert_eq!(x.id("খ"), UNK);
    }

    #[test]
    fn matches_counting_oracle() {
        let words = ["লাল", "নীল", "সবুজ", "পাখি", "বৃত্ত", "একটি", "ছোট", "বড়", "হলুদ", "সাদা"];
        let mut rng = RngStream::new(8, "data");
        let corpus: Vec<Vec<String>> = (0..100)
            .map(|_| (0..1 + rng.below(6)).map(|_| words[rng.below(words.len())].to_string()).collect())
            .collect();
        let v = Vocabulary::build(&corpus, 2);
        // oracle: count, then order by repeated max extraction
        let flat: Vec<&String> = corpus.iter().flatten().collect();
        let mut remaining: Vec<(String, usize, usize)> = Vec::new();
        for (p, t) in flat.iter().enumerate() {
            if !remaining.iter().any(|(w, _, _)| w == *t) {
                let c = flat.iter().filter(|x| x == &t).count();
                remaining.push(((*t).clone(), c, p));
            }
        }
        remaining.retain(|(_, c, _)| *c >= 2);
        let mut expected = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (a, b) = (&remaining[i], &remaining[best]);
                if a.1 > b.1 || (a.1 == b.1 && a.2 < b.2) {
                    best = i;
                }
            }
            expected.push(remaining.remove(best).0);
        }
        assert_eq!(&v.tokens()[3..], expected.as_slice());
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(&[vec!["লাল", "পাখি"]], 1);
        let c = encode_caption(&v, &["লাল"], 4).unwrap();
        assert_eq!(c.ids, vec![v.id("লাল"), EOS, PAD, PAD]);
        assert_eq!(c.length, 2);

        let toks: Vec<String> = (0..10).map(|i| if i % 2 == 0 { "লাল" } else { "পাখি" }.to_string()).collect();
        let c = encode_caption(&v, &toks, 5).unwrap();
        assert_eq!(c.length, 5);
        assert_eq!(c.ids[..4], [v.id("লাল"), v.id("পাখি"), v.id("লাল"), v.id("পাখি")]);
        assert_eq!(c.ids[4], EOS);

        let c = encode_caption(&v, &["লাল", "মাছ"], 6).unwrap();
        assert_eq!(c.ids[1], UNK);
        assert!(matches!(encode_caption::<&str>(&v, &[], 4), Err(Error::EmptyCaption)));
        assert!(encode_caption(&v, &["লাল"], 1).is_err());
    }

    proptest! {
        #[test]
        fn decode_recovers_prefix_up_to_unk(
            toks in proptest::collection::vec(0usize..8, 1..20),
            max_len in 2usize..12,
        ) {
            let words = ["ক", "খ", "গ", "ঘ", "ঙ", "চ", "ছ", "জ"];
            let tokens: Vec<&str> = toks.iter().map(|&i| words[i]).collect();
            // vocabulary only knows the first five words
            let v = Vocabulary::build(&[words[..5].to_vec()], 1);
            let c = encode_caption(&v, &tokens, max_len).unwrap();
            prop_assert!(c.length >= 1 && c.length <= max_len);
            prop_assert_eq!(c.ids[c.length - 1], EOS);
            prop_assert!(c.ids[c.length..].iter().all(|&i| i == PAD));
            let back = decode_caption(&v, &c);
            prop_assert_eq!(back.len(), tokens.len().min(max_len - 1));
            for (b, t) in back.iter().zip(&tokens) {
                if v.id(t) == UNK {
                    prop_assert_eq!(b.as_str(), "<unk>");
                } else {
                    prop_assert_eq!(b.as_str(), *t);
                }
            }
        }
    }
}
