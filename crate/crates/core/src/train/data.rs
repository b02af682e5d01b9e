//! Character-level vocabulary, corpus windowing, and a deterministic
//! synthetic corpus generator for desk-scale runs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Character vocabulary with pad/unknown specials. Ids are deterministic for
/// a given corpus: 0 = pad, 1 = unk, then the corpus characters in code-point
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    chars: Vec<char>,
    id_of: BTreeMap<char, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const SPECIALS: usize = 2;

    pub fn from_corpus(text: &str) -> Vocab {
        let mut set: Vec<char> = {
            let mut s: Vec<char> = text.chars().collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        set.shrink_to_fit();
        let id_of = set
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + Self::SPECIALS) as u32))
            .collect();
        Vocab { chars: set, id_of }
    }

    pub fn size(&self) -> usize {
        self.chars.len() + Self::SPECIALS
    }

    pub fn encode_strict(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len());
        let mut bad: Vec<char> = Vec::new();
        for c in text.chars() {
            match self.id_of.get(&c) {
                Some(&id) => out.push(id),
                None => {
                    if !bad.contains(&c) {
                        bad.push(c);
                    }
                }
            }
        }
        if !bad.is_empty() {
            return Err(Error::Vocab(format!(
                "characters not in vocabulary: {:?}",
                bad
            )));
        }
        Ok(out)
    }

    pub fn encode_lossy(&self, text: &str) -> Vec<u32> {
        text.chars()
            .map(|c| self.id_of.get(&c).copied().unwrap_or(Self::UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                Self::PAD => None,
                Self::UNK => Some('\u{FFFD}'),
                other => self.chars.get(other as usize - Self::SPECIALS).copied(),
            })
            .collect()
    }

    /// Comma-separated code points, for the checkpoint config block.
    pub fn to_codepoint_list(&self) -> String {
        self.chars
            .iter()
            .map(|&c| (c as u32).to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_codepoint_list(list: &str) -> Result<Vocab> {
        let mut chars = Vec::new();
        if !list.is_empty() {
            for part in list.split(',') {
                let cp: u32 = part
                    .parse()
                    .map_err(|_| Error::Vocab(format!("bad code point '{part}'")))?;
                let c = char::from_u32(cp)
                    .ok_or_else(|| Error::Vocab(format!("invalid code point {cp}")))?;
                chars.push(c);
            }
        }
        let id_of = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + Self::SPECIALS) as u32))
            .collect();
        Ok(Vocab { chars, id_of })
    }
}

/// One training pair: `target` is `input` shifted left by one token.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// Contiguous non-overlapping windows over a token stream, reshuffled by seed
/// each epoch and grouped into batches (the final batch may be short).
pub struct Batcher<'a> {
    stream: &'a [u32],
    batch_size: usize,
    seq_len: usize,
    seed: u64,
}

impl<'a> Batcher<'a> {
    pub fn new(stream: &'a [u32], batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if stream.len() <= seq_len {
            return Err(Error::Data(format!(
                "stream of {} tokens is too short for seq_len {}",
                stream.len(),
                seq_len
            )));
        }
        Ok(Batcher {
            stream,
            batch_size,
            seq_len,
            seed,
        })
    }

    pub fn windows_per_epoch(&self) -> usize {
        (self.stream.len() - 1) / self.seq_len
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.windows_per_epoch().div_ceil(self.batch_size)
    }

    fn window(&self, idx: usize) -> Window {
        let start = idx * self.seq_len;
        let input = self.stream[start..start + self.seq_len].to_vec();
        let target = self.stream[start + 1..start + self.seq_len + 1].to_vec();
        Window { input, target }
    }

    /// Batches for one epoch; the shuffle derives from (seed, epoch) only.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<Window>> {
        let mut order: Vec<usize> = (0..self.windows_per_epoch()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .map(|chunk| chunk.iter().map(|&i| self.window(i)).collect())
            .collect()
    }
}

/// Hold out the tail fraction of a stream for validation.
pub fn train_val_split(stream: &[u32], val_fraction: f64) -> (&[u32], &[u32]) {
    let val_len = ((stream.len() as f64) * val_fraction) as usize;
    let cut = stream.len() - val_len;
    (&stream[..cut], &stream[cut..])
}

const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "fox", "bear", "girl", "boy", "king", "queen", "tree", "river", "stone",
    "house", "garden", "mouse", "wolf", "ship", "star", "moon", "cloud", "fish", "horse", "child",
    "friend", "wizard", "dragon", "letter", "song", "road", "door",
];
const VERBS: &[&str] = &[
    "sees", "finds", "follows", "helps", "watches", "carries", "keeps", "makes", "paints",
    "builds", "opens", "closes", "loves", "brings", "hides", "shows", "meets", "leads", "holds",
    "calls",
];
const ADJS: &[&str] = &[
    "small", "big", "old", "young", "quiet", "bright", "dark", "happy", "sad", "quick", "slow",
    "warm", "cold", "green", "blue", "red", "kind", "brave", "wise", "strange",
];

/// Deterministic low-entropy English-like filler text of (at least) `n_bytes`
/// ASCII characters. Useful for desk-scale experiments where a real corpus is
/// unnecessary.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 64);
    while out.len() < n_bytes {
        let subject = NOUNS[rng.gen_range(0..NOUNS.len())];
        let verb = VERBS[rng.gen_range(0..VERBS.len())];
        let adj = ADJS[rng.gen_range(0..ADJS.len())];
        let object = NOUNS[rng.gen_range(0..NOUNS.len())];
        match rng.gen_range(0..4) {
            0 => {
                out.push_str("the ");
                out.push_str(adj);
                out.push(' ');
                out.push_str(subject);
                out.push(' ');
                out.push_str(verb);
                out.push_str(" the ");
                out.push_str(object);
                out.push_str(".\n");
            }
            1 => {
                out.push_str("a ");
                out.push_str(subject);
                out.push(' ');
                out.push_str(verb);
                out.push_str(" a ");
                out.push_str(adj);
                out.push(' ');
                out.push_str(object);
                out.push_str(".\n");
            }
            2 => {
                out.push_str("the ");
                out.push_str(subject);
                out.push_str(" and the ");
                out.push_str(object);
                out.push_str(" are ");
                out.push_str(adj);
                out.push_str(".\n");
            }
            _ => {
                out.push_str("one day the ");
                out.push_str(subject);
                out.push(' ');
                out.push_str(verb);
                out.push_str(" the ");
                out.push_str(adj);
                out.push(' ');
                out.push_str(object);
                out.push_str(".\n");
            }
        }
    }
    out.truncate(n_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_deterministic_and_bijective() {
        let v = Vocab::from_corpus("hello world");
        let v2 = Vocab::from_corpus("hello world");
        assert_eq!(v, v2);
        // distinct chars: ' ', d,e,h,l,o,r,w → 8 + 2 specials
        assert_eq!(v.size(), 10);
        let ids = v.encode_strict("hello").unwrap();
        assert_eq!(v.decode(&ids), "hello");
        // ids bijective over assigned range
        let mut seen = std::collections::HashSet::new();
        for c in "helo wrd".chars() {
            assert!(seen.insert(v.encode_strict(&c.to_string()).unwrap()[0]));
        }
    }

    #[test]
    fn strict_encode_names_offenders() {
        let v = Vocab::from_corpus("abc");
        let err = v.encode_strict("abz!").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('z') && msg.contains('!'), "{msg}");
        assert_eq!(v.encode_lossy("abz"), vec![2, 3, Vocab::UNK]);
    }

    #[test]
    fn vocab_codepoint_roundtrip() {
        let v = Vocab::from_corpus("the quick brown fox.\n");
        let list = v.to_codepoint_list();
        let back = Vocab::from_codepoint_list(&list).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn windows_follow_spec_example() {
        // stream [a,b,c,d,e], seq_len 2 → (a,b)→(b,c), (c,d)→(d,e)
        let stream = [10u32, 11, 12, 13, 14];
        let b = Batcher::new(&stream, 1, 2, 0).unwrap();
        assert_eq!(b.windows_per_epoch(), 2);
        let w0 = b.window(0);
        assert_eq!(w0.input, vec![10, 11]);
        assert_eq!(w0.target, vec![11, 12]);
        let w1 = b.window(1);
        assert_eq!(w1.input, vec![12, 13]);
        assert_eq!(w1.target, vec![13, 14]);
    }

    #[test]
    fn same_seed_same_order() {
        let stream: Vec<u32> = (0..1000).collect();
        let b1 = Batcher::new(&stream, 4, 16, 7).unwrap();
        let b2 = Batcher::new(&stream, 4, 16, 7).unwrap();
        for e in 0..3 {
            assert_eq!(b1.epoch(e), b2.epoch(e));
        }
        // different epochs shuffle differently
        assert_ne!(b1.epoch(0), b1.epoch(1));
    }

    #[test]
    fn windows_cover_stream_minus_tail_exactly_once() {
        let stream: Vec<u32> = (0..257).collect();
        let seq = 8;
        let b = Batcher::new(&stream, 3, seq, 5).unwrap();
        let mut covered = vec![0usize; stream.len()];
        for batch in b.epoch(0) {
            for w in batch {
                assert_eq!(w.input.len(), seq);
                assert_eq!(w.target.len(), seq);
                let start = stream
                    .iter()
                    .position(|&t| t == w.input[0])
                    .unwrap();
                for i in 0..seq {
                    covered[start + i] += 1;
                }
            }
        }
        let n_windows = (stream.len() - 1) / seq;
        for (i, &c) in covered.iter().enumerate() {
            if i < n_windows * seq {
                assert_eq!(c, 1, "position {i} covered {c} times");
            } else {
                assert_eq!(c, 0, "tail position {i} unexpectedly covered");
            }
        }
    }

    #[test]
    fn too_short_stream_is_an_error() {
        let stream = [1u32, 2, 3];
        assert!(Batcher::new(&stream, 1, 3, 0).is_err());
        assert!(Batcher::new(&stream, 1, 2, 0).is_ok());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_ascii() {
        let a = synthetic_corpus(10_000, 1);
        let b = synthetic_corpus(10_000, 1);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10_000);
        assert!(a.is_ascii());
        assert_ne!(a, synthetic_corpus(10_000, 2));
        // alphabet stays compact (lowercase + space + period + newline)
        let v = Vocab::from_corpus(&a);
        assert!(v.size() <= 32, "vocab {}", v.size());
    }

    #[test]
    fn split_takes_tail() {
        let stream: Vec<u32> = (0..100).collect();
        let (tr, va) = train_val_split(&stream, 0.1);
        assert_eq!(tr.len(), 90);
        assert_eq!(va.len(), 10);
        assert_eq!(va[0], 90);
    }
}
