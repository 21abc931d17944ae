//! Unsmoothed maximum-likelihood character language model over subtokens.
//!
//! Every training subtoken is read as `^token$`: a start symbol, its
//! characters and an end-of-token event. The trie counts every n-gram of up to
//! `max_depth` symbols, so `P(a | context)` is `count(context·a) / count(context)`
//! with the context truncated to the last `max_depth - 1` symbols. A prefix of
//! the remaining input is scored as a whole token, including the probability
//! that the token ends right after it. When a context was never observed, its
//! oldest symbol is dropped until a known context remains.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::corpus::{Boundaries, Dataset};
use crate::error::{Error, Result};
use crate::splitter::Splitter;

pub const DEFAULT_DEPTH: usize = 11;

const START: u8 = b'^';
const MAGIC: &str = "IDLM1";
const PAIR_MAGIC: &str = "IDLMPAIR";

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    symbol: u8,
    count: u64,
    boundary: u64,
    /// Sorted by symbol.
    children: Vec<(u8, u32)>,
}

impl Node {
    fn new(symbol: u8) -> Self {
        Node {
            symbol,
            count: 0,
            boundary: 0,
            children: Vec::new(),
        }
    }
}

/// Depth-limited n-gram trie with end-of-token counts.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    max_depth: usize,
    nodes: Vec<Node>,
}

// Arena order depends on insertion history, so compare the canonical
// preorder encoding instead.
impl PartialEq for PrefixTrie {
    fn eq(&self, other: &Self) -> bool {
        let encode = |t: &PrefixTrie| {
            let mut buf = Vec::new();
            t.write_to(Direction::Forward, &mut buf).expect("write to memory");
            buf
        };
        encode(self) == encode(other)
    }
}

impl Eq for PrefixTrie {}

impl PrefixTrie {
    pub fn new(max_depth: usize) -> Result<Self> {
        if max_depth < 2 {
            return Err(Error::Config(format!("trie depth must be at least 2, got {max_depth}")));
        }
        Ok(PrefixTrie {
            max_depth,
            nodes: vec![Node::new(0)],
        })
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn child(&self, node: u32, symbol: u8) -> Option<u32> {
        let children = &self.nodes[node as usize].children;
        children
            .binary_search_by_key(&symbol, |&(s, _)| s)
            .ok()
            .map(|i| children[i].1)
    }

    fn child_or_insert(&mut self, node: u32, symbol: u8) -> u32 {
        let next = self.nodes.len() as u32;
        let children = &mut self.nodes[node as usize].children;
        match children.binary_search_by_key(&symbol, |&(s, _)| s) {
            Ok(i) => children[i].1,
            Err(i) => {
                children.insert(i, (symbol, next));
                self.nodes.push(Node::new(symbol));
                next
            }
        }
    }

    fn find(&self, symbols: &[u8]) -> Option<u32> {
        symbols.iter().try_fold(0u32, |node, &s| self.child(node, s))
    }

    /// Adds `weight` occurrences of `token` (without the start symbol).
    pub fn insert(&mut self, token: &[u8], weight: u64) {
        let mut symbols = Vec::with_capacity(token.len() + 1);
        symbols.push(START);
        symbols.extend_from_slice(token);
        for start in 0..=symbols.len() {
            let mut node = 0;
            self.nodes[0].count += weight;
            let end = symbols.len().min(start + self.max_depth);
            for &s in &symbols[start..end] {
                node = self.child_or_insert(node, s);
                self.nodes[node as usize].count += weight;
            }
            if symbols.len() - start < self.max_depth {
                self.nodes[node as usize].boundary += weight;
            }
        }
    }

    /// Adds all counts of `other` into `self`.
    pub fn merge(&mut self, other: &PrefixTrie) -> Result<()> {
        if other.max_depth != self.max_depth {
            return Err(Error::Config(format!(
                "cannot merge tries of depth {} and {}",
                self.max_depth, other.max_depth
            )));
        }
        let mut stack = vec![(0u32, 0u32)];
        while let Some((mine, theirs)) = stack.pop() {
            let src = &other.nodes[theirs as usize];
            self.nodes[mine as usize].count += src.count;
            self.nodes[mine as usize].boundary += src.boundary;
            for &(symbol, child) in &src.children {
                let target = self.child_or_insert(mine, symbol);
                stack.push((target, child));
            }
        }
        Ok(())
    }

    /// `ln P(next | context)`, where `None` is the end-of-token event.
    /// Unknown contexts lose their oldest symbol until one is found.
    pub fn log_prob(&self, context: &[u8], next: Option<u8>) -> f64 {
        let keep = context.len().min(self.max_depth - 1);
        let mut context = &context[context.len() - keep..];
        loop {
            if let Some(node) = self.find(context) {
                let n = &self.nodes[node as usize];
                if n.count > 0 {
                    let hits = match next {
                        Some(s) => self.child(node, s).map_or(0, |c| self.nodes[c as usize].count),
                        None => n.boundary,
                    };
                    return if hits == 0 {
                        f64::NEG_INFINITY
                    } else {
                        (hits as f64 / n.count as f64).ln()
                    };
                }
            }
            if context.is_empty() {
                return f64::NEG_INFINITY;
            }
            context = &context[1..];
        }
    }

    /// Visits `(depth, count, boundary, sum of child counts)` for every node.
    pub fn for_each_node(&self, mut f: impl FnMut(usize, u64, u64, u64)) {
        let mut stack = vec![(0u32, 0usize)];
        while let Some((node, depth)) = stack.pop() {
            let n = &self.nodes[node as usize];
            let child_sum = n.children.iter().map(|&(_, c)| self.nodes[c as usize].count).sum();
            f(depth, n.count, n.boundary, child_sum);
            stack.extend(n.children.iter().map(|&(_, c)| (c, depth + 1)));
        }
    }

    pub fn write_to<W: Write>(&self, direction: Direction, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{MAGIC} {} {} {}", self.max_depth, direction, self.nodes.len())?;
        let mut stack = vec![0u32];
        while let Some(node) = stack.pop() {
            let n = &self.nodes[node as usize];
            out.write_all(&[n.symbol])?;
            out.write_all(&n.count.to_le_bytes())?;
            out.write_all(&n.boundary.to_le_bytes())?;
            out.write_all(&(n.children.len() as u64).to_le_bytes())?;
            stack.extend(n.children.iter().rev().map(|&(_, c)| c));
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<(Self, Direction)> {
        let header = read_line(input)?;
        let fields: Vec<&str> = header.split(' ').collect();
        let [magic, depth, direction, count] = fields[..] else {
            return Err(Error::Format(format!("bad trie header {header:?}")));
        };
        if magic != MAGIC {
            return Err(Error::Format(format!("expected {MAGIC}, found {magic:?}")));
        }
        let depth: usize = depth
            .parse()
            .map_err(|_| Error::Format(format!("bad depth {depth:?}")))?;
        let direction: Direction = direction.parse()?;
        let count: usize = count
            .parse()
            .map_err(|_| Error::Format(format!("bad node count {count:?}")))?;
        let mut trie = PrefixTrie::new(depth)?;
        trie.nodes.clear();
        // (node index, children still to attach)
        let mut open: Vec<(u32, u64)> = Vec::new();
        for i in 0..count {
            let mut buf = [0u8; 25];
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated trie at node {i}")))?;
            let u = |r: std::ops::Range<usize>| u64::from_le_bytes(buf[r].try_into().unwrap());
            let node = Node {
                symbol: buf[0],
                count: u(1..9),
                boundary: u(9..17),
                children: Vec::new(),
            };
            let kids = u(17..25);
            let index = trie.nodes.len() as u32;
            trie.nodes.push(node);
            if let Some((parent, remaining)) = open.last_mut() {
                let parent = *parent;
                *remaining -= 1;
                trie.nodes[parent as usize].children.push((buf[0], index));
            } else if i != 0 {
                return Err(Error::Format("trie node stream has several roots".into()));
            }
            while open.last().is_some_and(|&(_, r)| r == 0) {
                open.pop();
            }
            if kids > 0 {
                open.push((index, kids));
            }
        }
        if !open.is_empty() || trie.nodes.is_empty() {
            return Err(Error::Format("trie node stream ended early".into()));
        }
        for node in &mut trie.nodes {
            if node.children.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::Format("trie children out of order".into()));
            }
        }
        Ok((trie, direction))
    }
}

fn read_line<R: Read>(input: &mut R) -> Result<String> {
    let mut bytes = Vec::new();
    let mut b = [0u8; 1];
    loop {
        input
            .read_exact(&mut b)
            .map_err(|_| Error::Format("unexpected end of header".into()))?;
        if b[0] == b'\n' {
            break;
        }
        bytes.push(b[0]);
        if bytes.len() > 256 {
            return Err(Error::Format("header line too long".into()));
        }
    }
    String::from_utf8(bytes).map_err(|_| Error::Format("header is not UTF-8".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            _ => Err(Error::Format(format!("unknown direction {s:?}"))),
        }
    }
}

/// A trie read in one direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionalLm {
    pub trie: PrefixTrie,
    pub direction: Direction,
}

/// Counts every subtoken occurrence of the training split.
pub fn train_lm(dataset: &Dataset, max_depth: usize, direction: Direction) -> Result<DirectionalLm> {
    if dataset.train().next().is_none() {
        return Err(Error::Empty("training split".into()));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for record in dataset.train() {
        for token in record.subtokens() {
            *counts.entry(token).or_default() += 1;
        }
    }
    train_lm_from_counts(counts.iter().map(|(t, c)| (*t, *c)), max_depth, direction)
}

pub fn train_lm_from_counts<'a, I>(tokens: I, max_depth: usize, direction: Direction) -> Result<DirectionalLm>
where
    I: IntoIterator<Item = (&'a str, u64)>,
{
    let mut trie = PrefixTrie::new(max_depth)?;
    for (token, weight) in tokens {
        match direction {
            Direction::Forward => trie.insert(token.as_bytes(), weight),
            Direction::Backward => {
                let reversed: Vec<u8> = token.bytes().rev().collect();
                trie.insert(&reversed, weight)
            }
        }
    }
    Ok(DirectionalLm { trie, direction })
}

impl DirectionalLm {
    /// Log-probability that `chars` (in this model's reading direction) is a
    /// complete token.
    pub fn score_prefix(&self, chars: &str) -> f64 {
        let mut symbols = Vec::with_capacity(chars.len() + 1);
        symbols.push(START);
        let mut total = 0.0;
        for b in chars.bytes() {
            total += self.trie.log_prob(&symbols, Some(b));
            symbols.push(b);
        }
        total + self.trie.log_prob(&symbols, None)
    }

    fn split_reading_order(&self, text: &[u8]) -> Vec<usize> {
        let mut cuts = Vec::new();
        let mut start = 0;
        let mut symbols = Vec::with_capacity(text.len() + 1);
        while start < text.len() {
            symbols.clear();
            symbols.push(START);
            let mut acc = 0.0;
            let mut best = f64::NEG_INFINITY;
            let mut best_len = 0;
            for &b in &text[start..] {
                acc += self.trie.log_prob(&symbols, Some(b));
                if acc == f64::NEG_INFINITY {
                    break;
                }
                symbols.push(b);
                let score = acc + self.trie.log_prob(&symbols, None);
                if score > best {
                    best = score;
                    best_len = symbols.len() - 1;
                }
            }
            if best_len == 0 {
                break;
            }
            start += best_len;
            if start < text.len() {
                cuts.push(start);
            }
        }
        cuts
    }

    /// Greedy left-to-right segmentation: the highest scoring prefix wins,
    /// shortest on ties. Backward models split the reversed string.
    pub fn greedy_split(&self, merged: &str) -> Boundaries {
        match self.direction {
            Direction::Forward => self.split_reading_order(merged.as_bytes()).into_iter().collect(),
            Direction::Backward => {
                let reversed: Vec<u8> = merged.bytes().rev().collect();
                self.split_reading_order(&reversed)
                    .into_iter()
                    .map(|p| merged.len() - p)
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    And,
    Or,
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::And => "and",
            Combine::Or => "or",
        })
    }
}

impl FromStr for Combine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "and" => Ok(Combine::And),
            "or" => Ok(Combine::Or),
            _ => Err(Error::Format(format!("unknown combination {s:?}"))),
        }
    }
}

pub fn combine(forward: &Boundaries, backward: &Boundaries, mode: Combine) -> Boundaries {
    match mode {
        Combine::And => forward.intersection(backward).copied().collect(),
        Combine::Or => forward.union(backward).copied().collect(),
    }
}

/// Forward and backward models joined by conjunction or disjunction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmSplitter {
    pub forward: DirectionalLm,
    pub backward: DirectionalLm,
    pub mode: Combine,
}

impl LmSplitter {
    pub fn train(dataset: &Dataset, max_depth: usize, mode: Combine) -> Result<Self> {
        Ok(LmSplitter {
            forward: train_lm(dataset, max_depth, Direction::Forward)?,
            backward: train_lm(dataset, max_depth, Direction::Backward)?,
            mode,
        })
    }

    /// Directional predictions `(forward, backward)` before combination.
    pub fn directional(&self, merged: &str) -> (Boundaries, Boundaries) {
        (self.forward.greedy_split(merged), self.backward.greedy_split(merged))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{PAIR_MAGIC} {}\n", self.mode).into_bytes();
        self.forward
            .trie
            .write_to(Direction::Forward, &mut out)
            .expect("writing to a Vec cannot fail");
        self.backward
            .trie
            .write_to(Direction::Backward, &mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut input = bytes;
        let header = read_line(&mut input)?;
        let mode = header
            .strip_prefix(PAIR_MAGIC)
            .ok_or_else(|| Error::Format("not a language model container".into()))?
            .trim()
            .parse()?;
        let (fwd, d1) = PrefixTrie::read_from(&mut input)?;
        let (bwd, d2) = PrefixTrie::read_from(&mut input)?;
        if d1 != Direction::Forward || d2 != Direction::Backward {
            return Err(Error::Format("expected forward then backward trie".into()));
        }
        if !input.is_empty() {
            return Err(Error::Format("trailing bytes after language models".into()));
        }
        Ok(LmSplitter {
            forward: DirectionalLm {
                trie: fwd,
                direction: d1,
            },
            backward: DirectionalLm {
                trie: bwd,
                direction: d2,
            },
            mode,
        })
    }

    pub fn is_container(bytes: &[u8]) -> bool {
        bytes.starts_with(PAIR_MAGIC.as_bytes())
    }
}

impl Splitter for LmSplitter {
    fn split(&self, merged: &str) -> Boundaries {
        let (f, b) = self.directional(merged);
        combine(&f, &b, self.mode)
    }
}

impl Splitter for DirectionalLm {
    fn split(&self, merged: &str) -> Boundaries {
        self.greedy_split(merged)
    }
}

/// Every prefix of length `1..=len` with its score, for inspection and tests.
pub fn prefix_scores(lm: &DirectionalLm, text: &str) -> Vec<(usize, f64)> {
    (1..=text.len()).map(|i| (i, lm.score_prefix(&text[..i]))).collect()
}

/// Distinct characters the model has seen, excluding the start symbol.
pub fn alphabet(lm: &DirectionalLm) -> BTreeSet<u8> {
    lm.trie.nodes[0]
        .children
        .iter()
        .map(|&(s, _)| s)
        .filter(|&s| s != START)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(tokens: &[&str], depth: usize, direction: Direction) -> DirectionalLm {
        train_lm_from_counts(tokens.iter().map(|t| (*t, 1)), depth, direction).unwrap()
    }

    fn fwd(tokens: &[&str]) -> DirectionalLm {
        lm(tokens, DEFAULT_DEPTH, Direction::Forward)
    }

    fn b(v: &[usize]) -> Boundaries {
        v.iter().copied().collect()
    }

    #[test]
    fn conditional_probabilities() {
        let m = fwd(&["foo"]);
        assert_eq!(m.trie.log_prob(b"^fo", Some(b'o')), 0.0);
        let m = fwd(&["foo", "fox"]);
        assert!((m.trie.log_prob(b"^fo", Some(b'o')) - 0.5f64.ln()).abs() < 1e-12);
        assert!((m.trie.log_prob(b"^fo", Some(b'x')) - 0.5f64.ln()).abs() < 1e-12);
        assert!((m.trie.log_prob(b"fo", Some(b'x')) - 0.5f64.ln()).abs() < 1e-12);
        let m = fwd(&["ab", "ac", "ad"]);
        assert_eq!(m.trie.log_prob(b"^ab", None), 0.0);
        assert_eq!(m.trie.log_prob(b"ab", None), 0.0);
    }

    #[test]
    fn depth_below_two_is_rejected() {
        assert!(matches!(PrefixTrie::new(1), Err(Error::Config(_))));
    }

    #[test]
    fn score_examples() {
        let m = fwd(&["foo"]);
        assert_eq!(m.score_prefix("foo"), 0.0);
        assert_eq!(m.score_prefix("fo"), f64::NEG_INFINITY);
        assert_eq!(m.score_prefix("z"), f64::NEG_INFINITY);
    }

    #[test]
    fn sliding_context_matches_hand_counts() {
        // Depth 2: contexts are one symbol. Over "^aab$" and "^ab$":
        // count(^)=2, count(^a)=2; count(a)=3 with aa=1, ab=2;
        // count(b)=2 with b$=2.
        let m = lm(&["aab", "ab"], 2, Direction::Forward);
        let expected = 1.0f64.ln() + (1.0f64 / 3.0).ln() + (2.0f64 / 3.0).ln() + 1.0f64.ln();
        assert!((m.score_prefix("aab") - expected).abs() < 1e-12);
        // "ba" never occurs: P(a|b) = 0
        assert_eq!(m.score_prefix("ba"), f64::NEG_INFINITY);
    }

    #[test]
    fn unknown_context_slides_to_root() {
        let m = fwd(&["ab", "b"]);
        // context "^xa" is unknown, "xa" unknown, "a" known: P(b|a) = 1
        assert_eq!(m.trie.log_prob(b"^xa", Some(b'b')), 0.0);
    }

    /// Brute force: score every prefix independently and take the argmax.
    fn brute_split(m: &DirectionalLm, text: &str) -> Boundaries {
        let mut out = Boundaries::new();
        let mut start = 0;
        while start < text.len() {
            let rest = &text[start..];
            let scores = prefix_scores(m, rest);
            let best = scores.iter().fold(f64::NEG_INFINITY, |a, &(_, s)| a.max(s));
            if best == f64::NEG_INFINITY {
                break;
            }
            let len = scores.iter().find(|&&(_, s)| s == best).unwrap().0;
            start += len;
            if start < text.len() {
                out.insert(start);
            }
        }
        out
    }

    #[test]
    fn greedy_examples() {
        let m = fwd(&["foo", "bar"]);
        assert_eq!(m.greedy_split("foobar"), b(&[3]));
        assert_eq!(brute_split(&m, "foobar"), b(&[3]));
        assert_eq!(fwd(&["foobar"]).greedy_split("foobar"), b(&[]));
        let m = fwd(&["a"]);
        assert_eq!(m.greedy_split("aaa"), b(&[1, 2]));
        assert_eq!(brute_split(&m, "aaa"), b(&[1, 2]));
        assert_eq!(fwd(&["abc"]).greedy_split("zzz"), b(&[]));
    }

    #[test]
    fn greedy_matches_brute_force() {
        let tokens = ["get", "set", "value", "val", "name", "id", "ue", "na", "me", "get"];
        for direction in [Direction::Forward, Direction::Backward] {
            for depth in [2, 3, 4, 11] {
                let m = lm(&tokens, depth, direction);
                for text in ["getvalue", "setname", "idname", "valuename", "getidset", "nameid"] {
                    let expected = match direction {
                        Direction::Forward => brute_split(&m, text),
                        Direction::Backward => {
                            let rev: String = text.chars().rev().collect();
                            brute_split(&m, &rev).into_iter().map(|p| text.len() - p).collect()
                        }
                    };
                    assert_eq!(m.greedy_split(text), expected, "{text} depth {depth} {direction}");
                }
            }
        }
    }

    #[test]
    fn backward_model_mirrors() {
        let m = lm(&["foo", "bar"], DEFAULT_DEPTH, Direction::Backward);
        assert_eq!(m.greedy_split("foobar"), b(&[3]));
        // P(o | ^) = 1/2, everything after is deterministic
        assert_eq!(m.score_prefix("oof"), 0.5f64.ln());
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine(&b(&[3, 5]), &b(&[3]), Combine::And), b(&[3]));
        assert_eq!(combine(&b(&[3, 5]), &b(&[3]), Combine::Or), b(&[3, 5]));
        assert_eq!(combine(&b(&[]), &b(&[4]), Combine::And), b(&[]));
    }

    #[test]
    fn counts_are_consistent() {
        let m = lm(
            &["getvalue", "get", "value", "x", "abcdefghijklmnop"],
            5,
            Direction::Forward,
        );
        let mut nodes = 0;
        m.trie.for_each_node(|depth, count, boundary, children| {
            nodes += 1;
            assert!(depth <= 5);
            assert!(count >= boundary + children);
            if depth < 5 {
                assert_eq!(count, boundary + children);
            }
        });
        assert_eq!(nodes, m.trie.node_count());
    }

    #[test]
    fn merge_equals_joint_training() {
        let a = lm(&["foo", "bar"], 4, Direction::Forward);
        let c = lm(&["baz", "foo"], 4, Direction::Forward);
        let joint = lm(&["bar", "baz", "foo", "foo"], 4, Direction::Forward);
        let mut merged = a.trie.clone();
        merged.merge(&c.trie).unwrap();
        for text in ["foo", "ba", "baz", "fob"] {
            let d = DirectionalLm {
                trie: merged.clone(),
                direction: Direction::Forward,
            };
            assert_eq!(d.score_prefix(text), joint.score_prefix(text));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = LmSplitter {
            forward: lm(&["foo", "bar", "foobar"], 4, Direction::Forward),
            backward: lm(&["foo", "bar", "foobar"], 4, Direction::Backward),
            mode: Combine::Or,
        };
        let bytes = s.to_bytes();
        assert!(bytes.starts_with(b"IDLMPAIR or\nIDLM1 4 forward "));
        assert_eq!(LmSplitter::from_bytes(&bytes).unwrap(), s);
        assert!(LmSplitter::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn alphabet_excludes_start() {
        assert_eq!(alphabet(&fwd(&["ab"])), b"ab".iter().copied().collect());
    }
}
