//! Minimum-cost word segmentation over a frequency table.
//!
//! Words are treated as independent, so the cost of a segmentation is the sum
//! of per-word costs and the optimum is found exactly by dynamic programming.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use log::warn;

use crate::corpus::{is_subtoken, Boundaries, Dataset};
use crate::error::{Error, Result};
use crate::splitter::Splitter;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Entries are corpus counts; cost is the negative log relative frequency.
    Posterior,
    /// Entries are frequency ranks; cost is `ln(rank * ln N)`.
    Zipf,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Posterior => "posterior",
            Mode::Zipf => "zipf",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(Mode::Posterior),
            "zipf" => Ok(Mode::Zipf),
            _ => Err(Error::Config(format!("unknown frequency mode {s:?}"))),
        }
    }
}

/// Word → count (posterior) or word → rank (zipf).
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    mode: Mode,
    entries: HashMap<String, u64>,
    total_count: u64,
}

/// Cost of the word at `rank` in a Zipf table of `vocab_size` words, floored at 0.
pub fn zipf_cost(rank: u64, vocab_size: f64) -> f64 {
    let cost = (rank as f64 * vocab_size.ln()).ln();
    if cost.is_nan() || cost < 0.0 {
        0.0
    } else {
        cost
    }
}

impl FrequencyTable {
    pub fn posterior<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut map = HashMap::new();
        let mut total = 0u64;
        for (word, count) in entries {
            let word = word.into();
            if !is_subtoken(&word) {
                return Err(Error::InvalidSubtoken { token: word });
            }
            if count == 0 {
                return Err(Error::Config(format!("count of {word:?} must be at least 1")));
            }
            total += count;
            if map.insert(word.clone(), count).is_some() {
                return Err(Error::Config(format!("duplicate word {word:?}")));
            }
        }
        Ok(FrequencyTable {
            mode: Mode::Posterior,
            entries: map,
            total_count: total,
        })
    }

    /// Ranks follow iteration order, starting at 1.
    pub fn zipf<I, S>(ranked_words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut map = HashMap::new();
        for (i, word) in ranked_words.into_iter().enumerate() {
            let word = word.into();
            if !is_subtoken(&word) {
                return Err(Error::InvalidSubtoken { token: word });
            }
            if map.insert(word.clone(), i as u64 + 1).is_some() {
                return Err(Error::Config(format!("duplicate word {word:?}")));
            }
        }
        let total = map.len() as u64;
        Ok(FrequencyTable {
            mode: Mode::Zipf,
            entries: map,
            total_count: total,
        })
    }

    /// Ranks a posterior table by descending count, ties broken by word.
    pub fn to_zipf(&self) -> FrequencyTable {
        let mut words: Vec<(&String, u64)> = self.entries.iter().map(|(w, c)| (w, *c)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        FrequencyTable::zipf(words.into_iter().map(|(w, _)| w.clone())).expect("words were validated on construction")
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    pub fn vocab_size(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, word: &str) -> Option<u64> {
        self.entries.get(word).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by word (posterior) or by rank (zipf).
    pub fn sorted_entries(&self) -> Vec<(&str, u64)> {
        let mut v: Vec<(&str, u64)> = self.entries.iter().map(|(w, c)| (w.as_str(), *c)).collect();
        match self.mode {
            Mode::Posterior => v.sort(),
            Mode::Zipf => v.sort_by_key(|&(_, r)| r),
        }
        v
    }

    /// Cost of an in-vocabulary word, `None` when out of vocabulary.
    pub fn known_cost(&self, word: &str) -> Option<f64> {
        let value = *self.entries.get(word)?;
        Some(match self.mode {
            Mode::Posterior => -(value as f64 / self.total_count as f64).ln(),
            Mode::Zipf => zipf_cost(value, self.entries.len() as f64),
        })
    }
}

/// Counts subtoken occurrences over the training split.
pub fn table_from_dataset(dataset: &Dataset) -> Result<FrequencyTable> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for record in dataset.train() {
        for token in record.subtokens() {
            *counts.entry(token).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyTable);
    }
    FrequencyTable::posterior(counts.into_iter().map(|(w, c)| (w.to_string(), c)))
}

/// Parses a frequency file. Returns the table and the number of lines skipped
/// because the word was not `[a-z0-9]+`.
///
/// Posterior files hold `word<TAB>count` lines; zipf files list one word per
/// line, most frequent first (a trailing count column is ignored). Blank lines
/// and lines starting with `#` are ignored.
pub fn parse_frequency_file<R: BufRead>(reader: R, mode: Mode) -> Result<(FrequencyTable, usize)> {
    let mut skipped = 0;
    let mut seen = HashMap::new();
    let mut ordered = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let word = cols.next().unwrap_or_default().trim();
        let count = match mode {
            Mode::Posterior => {
                let raw = cols
                    .next()
                    .ok_or_else(|| Error::parse(lineno, "expected word<TAB>count"))?;
                let count: u64 = raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad count {raw:?}")))?;
                if count == 0 {
                    return Err(Error::parse(lineno, "count must be at least 1"));
                }
                count
            }
            Mode::Zipf => 0,
        };
        if cols.next().is_some() && mode == Mode::Posterior {
            return Err(Error::parse(lineno, "too many columns"));
        }
        if !is_subtoken(word) {
            skipped += 1;
            continue;
        }
        if seen.insert(word.to_string(), lineno).is_some() {
            return Err(Error::parse(lineno, format!("duplicate word {word:?}")));
        }
        ordered.push((word.to_string(), count));
    }
    if skipped > 0 {
        warn!("skipped {skipped} frequency entries outside [a-z0-9]");
    }
    let table = match mode {
        Mode::Posterior => FrequencyTable::posterior(ordered)?,
        Mode::Zipf => FrequencyTable::zipf(ordered.into_iter().map(|(w, _)| w))?,
    };
    Ok((table, skipped))
}

pub fn load_frequency_file(path: &Path, mode: Mode) -> Result<(FrequencyTable, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_frequency_file(BufReader::new(file), mode)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    /// Cost per character of an out-of-vocabulary word, in nats.
    pub oov_penalty: f64,
    /// Constant added once per out-of-vocabulary word, in nats.
    pub oov_constant: f64,
    pub max_word_len: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            oov_penalty: 10.0,
            oov_constant: 3.0,
            max_word_len: 24,
        }
    }
}

pub fn word_cost(table: &FrequencyTable, word: &str, config: &DpConfig) -> f64 {
    table
        .known_cost(word)
        .unwrap_or(config.oov_penalty * word.len() as f64 + config.oov_constant)
}

#[derive(Clone, Copy)]
struct Cell {
    cost: f64,
    words: usize,
    back: usize,
}

fn boundaries_from(cells: &[Option<Cell>], mut end: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while end > 0 {
        let back = cells[end].expect("reachable cell").back;
        if back > 0 {
            out.push(back);
        }
        end = back;
    }
    out.reverse();
    out
}

/// Relative tolerance under which two path costs count as tied. Summing the
/// same words in a different order can differ in the last bit.
pub const COST_TIE_TOLERANCE: f64 = 1e-12;

pub fn same_cost(a: f64, b: f64) -> bool {
    a == b || (a.is_finite() && b.is_finite() && (a - b).abs() <= COST_TIE_TOLERANCE * a.abs().max(b.abs()))
}

/// Exact segmentation for an arbitrary per-word cost function.
///
/// Minimizes total cost; ties go to fewer words, then to the lexicographically
/// smallest boundary sequence.
pub fn segment_with<F>(merged: &str, max_word_len: usize, mut cost: F) -> (Boundaries, f64)
where
    F: FnMut(&str) -> f64,
{
    let n = merged.len();
    if n == 0 {
        return (Boundaries::new(), 0.0);
    }
    let window = max_word_len.max(1);
    let mut cells: Vec<Option<Cell>> = vec![None; n + 1];
    cells[0] = Some(Cell {
        cost: 0.0,
        words: 0,
        back: 0,
    });
    for end in 1..=n {
        let mut best: Option<Cell> = None;
        for start in end.saturating_sub(window)..end {
            let Some(prev) = cells[start] else { continue };
            let cand = Cell {
                cost: prev.cost + cost(&merged[start..end]),
                words: prev.words + 1,
                back: start,
            };
            let better = match best {
                None => true,
                Some(b) => {
                    if !same_cost(cand.cost, b.cost) {
                        cand.cost < b.cost
                    } else if cand.words != b.words {
                        cand.words < b.words
                    } else {
                        let mut x = boundaries_from(&cells, cand.back);
                        if cand.back > 0 {
                            x.push(cand.back);
                        }
                        let mut y = boundaries_from(&cells, b.back);
                        if b.back > 0 {
                            y.push(b.back);
                        }
                        x < y
                    }
                }
            };
            if better {
                best = Some(cand);
            }
        }
        cells[end] = best;
    }
    let total = cells[n].expect("every prefix is reachable").cost;
    (boundaries_from(&cells, n).into_iter().collect(), total)
}

pub fn dp_split(table: &FrequencyTable, merged: &str, config: &DpConfig) -> (Boundaries, f64) {
    segment_with(merged, config.max_word_len, |w| word_cost(table, w, config))
}

/// Frequency-table segmenter usable as a [`Splitter`].
#[derive(Debug, Clone, PartialEq)]
pub struct DpSplitter {
    pub table: FrequencyTable,
    pub config: DpConfig,
}

const MAGIC: &str = "IDDP1";

impl DpSplitter {
    pub fn new(table: FrequencyTable, config: DpConfig) -> Self {
        DpSplitter { table, config }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{MAGIC} mode={} oov_penalty={} oov_constant={} max_word_len={}\n",
            self.table.mode, self.config.oov_penalty, self.config.oov_constant, self.config.max_word_len
        );
        for (word, value) in self.table.sorted_entries() {
            match self.table.mode {
                Mode::Posterior => out.push_str(&format!("{word}\t{value}\n")),
                Mode::Zipf => {
                    out.push_str(word);
                    out.push('\n');
                }
            }
        }
        out.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Utf8 {
            offset: e.valid_up_to(),
        })?;
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| Error::Format("missing DP header".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(MAGIC) {
            return Err(Error::Format("not a DP model".into()));
        }
        let mut mode = None;
        let mut config = DpConfig::default();
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            let bad = || Error::Format(format!("bad value for {key}: {value:?}"));
            match key {
                "mode" => mode = Some(value.parse::<Mode>()?),
                "oov_penalty" => config.oov_penalty = value.parse().map_err(|_| bad())?,
                "oov_constant" => config.oov_constant = value.parse().map_err(|_| bad())?,
                "max_word_len" => config.max_word_len = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::Format(format!("unknown header field {key:?}"))),
            }
        }
        let mode = mode.ok_or_else(|| Error::Format("DP header lacks mode".into()))?;
        let (table, _) = parse_frequency_file(body.as_bytes(), mode)?;
        Ok(DpSplitter { table, config })
    }

    pub fn is_container(bytes: &[u8]) -> bool {
        bytes.starts_with(MAGIC.as_bytes())
    }
}

impl Splitter for DpSplitter {
    fn split(&self, merged: &str) -> Boundaries {
        dp_split(&self.table, merged, &self.config).0
    }
}
