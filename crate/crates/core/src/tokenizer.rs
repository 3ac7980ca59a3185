//! Byte-level BPE with fixed special tokens.
//!
//! Text is split into word chunks (a word plus its leading space) and merges
//! never cross chunk boundaries. Base pieces are single bytes, so any text
//! drawn from the training byte set is encodable and `decode(encode(x)) == x`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const SEP: u32 = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<mask>", "<sep>"];

/// Pairs seen fewer times than this are never merged.
const MIN_PAIR_COUNT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
    byte_ids: [Option<u32>; 256],
    sentinel_start: usize,
    num_sentinels: usize,
}

/// Split into chunks at each space; the space stays with the following word.
fn chunks(text: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..text.len() {
        if text[i] == b' ' && text[i - 1] != b' ' {
            out.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Train a BPE vocabulary. Merges pick the most frequent adjacent pair,
/// ties broken by the lexicographic order of the two pieces' bytes.
///
/// The procedure is fully deterministic in the corpus order; `seed` is
/// accepted for interface stability and does not change the result.
pub fn train_bpe<'a, I>(corpus: I, target_vocab: usize, _seed: u64) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut words: HashMap<Vec<u8>, u64> = HashMap::new();
    let mut seen = [false; 256];
    let mut any = false;
    for line in corpus {
        any = true;
        for c in chunks(line.as_bytes()) {
            for &b in c {
                seen[b as usize] = true;
            }
            *words.entry(c.to_vec()).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Tokenizer("empty training corpus".into()));
    }
    let distinct = seen.iter().filter(|&&s| s).count();
    let minimum = NUM_SPECIALS + distinct + 1;
    if target_vocab < minimum {
        return Err(Error::Tokenizer(format!("target vocabulary {target_vocab} too small; minimum is {minimum}")));
    }

    let mut pieces: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()).collect();
    let mut byte_ids = [None; 256];
    for b in 0..256usize {
        if seen[b] {
            byte_ids[b] = Some(pieces.len() as u32);
            pieces.push(vec![b as u8]);
        }
    }

    // Sorted for a stable iteration order.
    let mut word_list: Vec<(Vec<u8>, u64)> = words.into_iter().collect();
    word_list.sort();
    let mut seqs: Vec<(Vec<u32>, u64)> =
        word_list.iter().map(|(w, c)| (w.iter().map(|&b| byte_ids[b as usize].unwrap()).collect(), *c)).collect();

    let mut merges = Vec::new();
    while pieces.len() < target_vocab {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (seq, c) in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += c;
            }
        }
        let best = counts.into_iter().filter(|&(_, c)| c >= MIN_PAIR_COUNT).max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                // smaller key wins the tie
                kb.cmp(&ka)
            })
        });
        let Some(((l, r), _)) = best else { break };
        let new_id = pieces.len() as u32;
        let mut piece = pieces[l as usize].clone();
        piece.extend_from_slice(&pieces[r as usize]);
        pieces.push(piece);
        merges.push((l, r));
        for (seq, _) in seqs.iter_mut() {
            apply_merge(seq, l, r, new_id);
        }
    }

    let sentinel_start = pieces.len();
    Ok(Vocab::assemble(pieces, merges, byte_ids, sentinel_start, 0))
}

fn apply_merge(seq: &mut Vec<u32>, l: u32, r: u32, new_id: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

impl Vocab {
    fn assemble(
        pieces: Vec<Vec<u8>>,
        merges: Vec<(u32, u32)>,
        byte_ids: [Option<u32>; 256],
        sentinel_start: usize,
        num_sentinels: usize,
    ) -> Self {
        let first_merge = sentinel_start - merges.len();
        let merge_rank =
            merges.iter().enumerate().map(|(rank, &pair)| (pair, (rank, (first_merge + rank) as u32))).collect();
        Vocab { pieces, merges, merge_rank, byte_ids, sentinel_start, num_sentinels }
    }

    /// Append `n` sentinel ids (used by span corruption) after all pieces.
    pub fn with_sentinels(mut self, n: usize) -> Self {
        for k in self.num_sentinels..self.num_sentinels + n {
            self.pieces.push(format!("<extra_id_{k}>").into_bytes());
        }
        self.num_sentinels += n;
        self
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(|p| p.as_slice())
    }

    pub fn num_sentinels(&self) -> usize {
        self.num_sentinels
    }

    pub fn sentinel(&self, k: usize) -> Option<u32> {
        (k < self.num_sentinels).then(|| (self.sentinel_start + k) as u32)
    }

    /// Specials and sentinels: ids that carry no text.
    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS || (id as usize) >= self.sentinel_start
    }

    pub fn encode(&self, text: &str, add_bos: bool, add_eos: bool) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        if add_bos {
            ids.push(BOS);
        }
        let bytes = text.as_bytes();
        let mut offset = 0;
        for c in chunks(bytes) {
            let mut seq = Vec::with_capacity(c.len());
            for (i, &b) in c.iter().enumerate() {
                let id = self.byte_ids[b as usize].ok_or(Error::Unencodable { byte: b, offset: offset + i })?;
                seq.push(id);
            }
            offset += c.len();
            loop {
                let best = seq
                    .windows(2)
                    .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                    .min();
                match best {
                    Some((_, l, r, id)) => apply_merge(&mut seq, l, r, id),
                    None => break,
                }
            }
            ids.extend(seq);
        }
        if add_eos {
            ids.push(EOS);
        }
        Ok(ids)
    }

    /// Encode and cap at `max_len` ids. With `truncate` the tail is cut
    /// (keeping the closing EOS when requested); otherwise overflow is an
    /// error.
    pub fn encode_max(
        &self,
        text: &str,
        add_bos: bool,
        add_eos: bool,
        max_len: usize,
        truncate: bool,
    ) -> Result<Vec<u32>> {
        let mut ids = self.encode(text, add_bos, add_eos)?;
        if ids.len() > max_len {
            if !truncate {
                return Err(Error::Tokenizer(format!("sequence of {} ids exceeds max length {max_len}", ids.len())));
            }
            ids.truncate(max_len);
            if add_eos && max_len > 0 {
                ids[max_len - 1] = EOS;
            }
        }
        Ok(ids)
    }

    /// Concatenate pieces, skipping specials and sentinels.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.pieces.len() {
                return Err(Error::UnknownId { id, vocab: self.pieces.len() });
            }
            if !self.is_special(id) {
                bytes.extend_from_slice(&self.pieces[id as usize]);
            }
        }
        String::from_utf8(bytes).map_err(|e| Error::Tokenizer(format!("decoded bytes are not UTF-8: {e}")))
    }

    /// Vocab file: `<id>\t<hex piece>` per id, then `#MERGES` and one
    /// `<left> <right>` line per merge.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (id, p) in self.pieces.iter().enumerate() {
            let _ = write!(s, "{id}\t");
            for b in p {
                let _ = write!(s, "{b:02x}");
            }
            s.push('\n');
        }
        s.push_str("#MERGES\n");
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Tokenizer(format!("malformed vocab file: {msg}"));
        let mut pieces = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for (ln, line) in text.lines().enumerate() {
            if line == "#MERGES" {
                in_merges = true;
                continue;
            }
            if in_merges {
                let mut it = line.split(' ');
                let (Some(l), Some(r), None) = (it.next(), it.next(), it.next()) else {
                    return Err(bad(format!("line {}: expected two ids", ln + 1)));
                };
                let l: u32 = l.parse().map_err(|_| bad(format!("line {}", ln + 1)))?;
                let r: u32 = r.parse().map_err(|_| bad(format!("line {}", ln + 1)))?;
                merges.push((l, r));
            } else {
                let (id, hex) = line.split_once('\t').ok_or_else(|| bad(format!("line {}", ln + 1)))?;
                let id: usize = id.parse().map_err(|_| bad(format!("line {}", ln + 1)))?;
                if id != pieces.len() {
                    return Err(bad(format!("ids must be dense, got {id} at line {}", ln + 1)));
                }
                if hex.len() % 2 != 0 {
                    return Err(bad(format!("odd hex length at line {}", ln + 1)));
                }
                let piece = (0..hex.len())
                    .step_by(2)
                    .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
                    .collect::<std::result::Result<Vec<u8>, _>>()
                    .map_err(|_| bad(format!("bad hex at line {}", ln + 1)))?;
                pieces.push(piece);
            }
        }
        if pieces.len() < NUM_SPECIALS {
            return Err(bad("missing special tokens".into()));
        }
        let mut byte_ids = [None; 256];
        let mut next = NUM_SPECIALS;
        while next < pieces.len() && pieces[next].len() == 1 && byte_ids[pieces[next][0] as usize].is_none() {
            byte_ids[pieces[next][0] as usize] = Some(next as u32);
            next += 1;
        }
        for (k, &(l, r)) in merges.iter().enumerate() {
            let id = next + k;
            let (Some(lp), Some(rp), Some(p)) = (pieces.get(l as usize), pieces.get(r as usize), pieces.get(id)) else {
                return Err(bad(format!("merge {k} references missing ids")));
            };
            if (l as usize) >= id || (r as usize) >= id || [lp.as_slice(), rp.as_slice()].concat() != *p {
                return Err(bad(format!("merge {k} does not produce piece {id}")));
            }
        }
        let sentinel_start = next + merges.len();
        let num_sentinels = pieces.len() - sentinel_start;
        Ok(Vocab::assemble(pieces, merges, byte_ids, sentinel_start, num_sentinels))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }
}

/// Masked-LM corruption: each non-special position is replaced by `MASK`
/// with probability `rate`. Returns the corrupted sequence and the
/// `(position, original id)` targets.
pub fn mask_tokens<R: Rng + ?Sized>(
    ids: &[u32],
    vocab: &Vocab,
    rate: f64,
    rng: &mut R,
) -> (Vec<u32>, Vec<(usize, u32)>) {
    let mut out = ids.to_vec();
    let mut targets = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if vocab.is_special(id) {
            continue;
        }
        if rng.gen::<f64>() < rate {
            out[i] = MASK;
            targets.push((i, id));
        }
    }
    (out, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_a_corpus() {
        // specials(5) + 'a' = 6 ids; one merge (a,a) reaches 7
        let v = train_bpe(["aaaa"], 7, 0).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.merges(), &[(5, 5)]);
        let ids = v.encode("aaaa", false, false).unwrap();
        assert_eq!(ids, vec![6, 6]);
    }

    #[test]
    fn target_too_small_names_minimum() {
        let err = train_bpe(["abc"], 8, 0).unwrap_err().to_string();
        assert!(err.contains("minimum is 9"), "{err}");
    }

    #[test]
    fn empty_text_with_markers() {
        let v = train_bpe(["a b"], 20, 0).unwrap();
        assert_eq!(v.encode("", true, true).unwrap(), vec![BOS, EOS]);
        assert_eq!(v.decode(&[BOS, EOS]).unwrap(), "");
    }

    #[test]
    fn unknown_byte_reports_offset() {
        let v = train_bpe(["ab ab"], 20, 0).unwrap();
        match v.encode("ab z", false, false) {
            Err(Error::Unencodable { byte: b'z', offset: 3 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_decode() {
        let v = train_bpe(["ab"], 20, 0).unwrap();
        assert!(matches!(v.decode(&[999]), Err(Error::UnknownId { id: 999, .. })));
    }

    #[test]
    fn single_byte_pieces_decode_bytewise() {
        let v = train_bpe(["xy"], 8, 0).unwrap();
        let x = v.encode("x", false, false).unwrap();
        assert_eq!(x.len(), 1);
        assert_eq!(v.decode(&x).unwrap(), "x");
    }

    #[test]
    fn paper_scale_target_is_accepted() {
        let v = train_bpe(["a red square", "a blue circle"], 32_000, 0).unwrap();
        assert!(v.len() <= 32_000);
    }

    #[test]
    fn max_length_truncates_or_errors() {
        let v = train_bpe(["a b c d e f g"], 30, 0).unwrap();
        let text = "a b c d e f g";
        assert!(v.encode_max(text, true, true, 4, false).is_err());
        let ids = v.encode_max(text, true, true, 4, true).unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(*ids.last().unwrap(), EOS);
        let long = vec!["a"; 300].join(" ");
        assert_eq!(v.encode_max(&long, true, true, 256, true).unwrap().len(), 256);
    }

    #[test]
    fn vocab_file_roundtrip_with_sentinels() {
        let v = train_bpe(["the red square", "the blue circle"], 40, 0).unwrap().with_sentinels(3);
        let s = v.to_file_string();
        let back = Vocab::from_file_string(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_file_string(), s);
        assert_eq!(back.num_sentinels(), 3);
        assert!(back.is_special(back.sentinel(0).unwrap()));
    }

    #[test]
    fn mask_rate_limits() {
        let v = train_bpe(["a b c"], 20, 0).unwrap();
        let ids = v.encode("a b c", true, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, tg) = mask_tokens(&ids, &v, 0.0, &mut rng);
        assert_eq!(out, ids);
        assert!(tg.is_empty());
        let (out, tg) = mask_tokens(&ids, &v, 1.0, &mut rng);
        assert_eq!(out[0], BOS);
        assert_eq!(*out.last().unwrap(), EOS);
        assert!(out[1..out.len() - 1].iter().all(|&i| i == MASK));
        assert_eq!(tg.len(), ids.len() - 2);
    }
}
