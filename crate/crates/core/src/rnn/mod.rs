//! Character-level bidirectional recurrent splitter: one-hot characters, two
//! stacked bidirectional LSTM or GRU layers and a per-position sigmoid that
//! marks where a new subtoken starts.

mod checkpoint;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::corpus::{Boundaries, MAX_MERGED_LEN};
use crate::error::{Error, Result};
use crate::nn::{Architecture, BatchInput, CellKind, Network, ParamSet, Tensor};
use crate::splitter::{split_identifier, Splitter};

pub use checkpoint::{load_model, load_model_as, save_model};
pub use train::{train, train_with, EpochLog, TrainConfig};

pub const SEQ_LEN: usize = MAX_MERGED_LEN;
pub const WINDOW_STRIDE: usize = 20;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const MANIFEST_VERSION: u32 = 1;
const OOV: char = '?';

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("unknown cell type {other:?}"))),
        }
    }
}

/// Everything needed to rebuild a network besides its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelManifest {
    pub cell: CellKind,
    pub layers: usize,
    /// Units per direction per layer.
    pub hidden: usize,
    pub seq_len: usize,
    /// Known characters followed by the out-of-vocabulary symbol.
    pub alphabet: Vec<char>,
    pub threshold: f64,
    pub version: u32,
}

impl ModelManifest {
    pub fn new(cell: CellKind, hidden: usize) -> Self {
        let alphabet = ('a'..='z').chain('0'..='9').chain([OOV]).collect();
        ModelManifest {
            cell,
            layers: 2,
            hidden,
            seq_len: SEQ_LEN,
            alphabet,
            threshold: DEFAULT_THRESHOLD,
            version: MANIFEST_VERSION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("hidden size and layer count must be at least 1".into()));
        }
        if self.seq_len != SEQ_LEN {
            return Err(Error::Config(format!("sequence length must be {SEQ_LEN}")));
        }
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", self.version)));
        }
        let mut seen = std::collections::BTreeSet::new();
        if self.alphabet.len() < 2 || !self.alphabet.iter().all(|c| seen.insert(*c)) {
            return Err(Error::Config("alphabet must hold distinct symbols plus OOV".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            cell: self.cell,
            input_size: self.alphabet.len(),
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    pub fn oov_index(&self) -> usize {
        self.alphabet.len() - 1
    }

    pub fn symbol_index(&self, c: char) -> usize {
        let known = &self.alphabet[..self.oov_index()];
        known.iter().position(|&a| a == c).unwrap_or(self.oov_index())
    }

    fn indexer(&self) -> impl Fn(char) -> usize + '_ {
        let table: BTreeMap<char, usize> = self.alphabet[..self.oov_index()]
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
        let oov = self.oov_index();
        move |c| table.get(&c).copied().unwrap_or(oov)
    }
}

/// A padded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// `[seq_len × |alphabet|]`
    pub one_hot: Tensor<f32>,
    /// `[seq_len]`
    pub labels: Tensor<f32>,
    pub mask: usize,
}

/// One-hot characters and boundary labels, zero-padded to `seq_len`.
/// Positions are character indices.
pub fn encode(merged: &str, boundaries: &Boundaries, manifest: &ModelManifest) -> Result<Encoded> {
    let chars: Vec<char> = merged.chars().collect();
    if chars.is_empty() {
        return Err(Error::Empty("cannot encode an empty string".into()));
    }
    if chars.len() > manifest.seq_len {
        return Err(Error::Config(format!(
            "{merged:?} is longer than {} characters",
            manifest.seq_len
        )));
    }
    let width = manifest.alphabet.len();
    let mut one_hot = Tensor::zeros(vec![manifest.seq_len, width]);
    let mut labels = Tensor::zeros(vec![manifest.seq_len]);
    for (t, &c) in chars.iter().enumerate() {
        one_hot.data_mut()[t * width + manifest.symbol_index(c)] = 1.0;
    }
    for &b in boundaries {
        if b < chars.len() {
            labels.data_mut()[b] = 1.0;
        }
    }
    Ok(Encoded {
        one_hot,
        labels,
        mask: chars.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPrediction {
    /// One probability per character.
    pub probs: Vec<f64>,
    /// Character positions whose probability exceeds the threshold.
    pub boundaries: Boundaries,
}

/// Trained network plus its manifest. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnModel {
    manifest: ModelManifest,
    params: ParamSet<f32>,
}

impl RnnModel {
    pub fn new(manifest: ModelManifest, params: ParamSet<f32>) -> Result<Self> {
        manifest.validate()?;
        params.validate(&manifest.architecture())?;
        Ok(RnnModel { manifest, params })
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        self.manifest.threshold = threshold;
        self.manifest.validate()?;
        Ok(self)
    }

    pub fn predict(&self, merged: &str) -> Result<SplitPrediction> {
        Ok(self.predict_batch(&[merged])?.remove(0))
    }

    /// Predicts several strings in one forward pass. Strings longer than
    /// `seq_len` are cut into windows of `seq_len` characters every
    /// [`WINDOW_STRIDE`] and overlapping probabilities are averaged.
    pub fn predict_batch(&self, merged: &[&str]) -> Result<Vec<SplitPrediction>> {
        let index = self.manifest.indexer();
        let seq_len = self.manifest.seq_len;
        let mut windows = Vec::new();
        // (string, start offset) per window
        let mut owners = Vec::new();
        let mut lens = Vec::with_capacity(merged.len());
        for (i, text) in merged.iter().enumerate() {
            let symbols: Vec<usize> = text.chars().map(&index).collect();
            if symbols.is_empty() {
                return Err(Error::Empty("cannot split an empty string".into()));
            }
            lens.push(symbols.len());
            for start in window_starts(symbols.len(), seq_len) {
                let end = (start + seq_len).min(symbols.len());
                windows.push(symbols[start..end].to_vec());
                owners.push((i, start));
            }
        }
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut net = Network::new(self.manifest.architecture(), self.params.clone())?;
        net.forward(&BatchInput::OneHot(windows))?;
        let window_probs = net.probabilities()?;
        let mut sums: Vec<Vec<f64>> = lens.iter().map(|&l| vec![0.0; l]).collect();
        let mut hits: Vec<Vec<u32>> = lens.iter().map(|&l| vec![0; l]).collect();
        for ((i, start), probs) in owners.into_iter().zip(window_probs) {
            for (k, p) in probs.into_iter().enumerate() {
                sums[i][start + k] += f64::from(p);
                hits[i][start + k] += 1;
            }
        }
        Ok(sums
            .into_iter()
            .zip(hits)
            .map(|(sum, hit)| {
                let probs: Vec<f64> = sum.iter().zip(&hit).map(|(s, &h)| s / f64::from(h)).collect();
                let boundaries = (1..probs.len())
                    .filter(|&t| probs[t] > self.manifest.threshold)
                    .collect();
                SplitPrediction { probs, boundaries }
            })
            .collect())
    }

    /// Heuristic split first, then the network refines each part.
    pub fn split_text(&self, identifier: &str) -> Vec<String> {
        split_identifier(self, identifier)
    }
}

/// Window start offsets covering `len` characters.
fn window_starts(len: usize, seq_len: usize) -> Vec<usize> {
    if len <= seq_len {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * WINDOW_STRIDE)
        .take_while(|&s| s + seq_len < len)
        .collect();
    starts.push(len - seq_len);
    starts
}

/// Converts character positions to byte offsets of `text`.
fn char_to_byte(text: &str, boundaries: &Boundaries) -> Boundaries {
    if text.is_ascii() {
        return boundaries.clone();
    }
    text.char_indices()
        .enumerate()
        .filter(|(i, _)| boundaries.contains(i))
        .map(|(_, (b, _))| b)
        .collect()
}

impl Splitter for RnnModel {
    fn split(&self, merged: &str) -> Boundaries {
        self.split_batch(&[merged]).remove(0)
    }

    fn split_batch(&self, merged: &[&str]) -> Vec<Boundaries> {
        let nonempty: Vec<&str> = merged.iter().copied().filter(|m| !m.is_empty()).collect();
        let mut predictions = match self.predict_batch(&nonempty) {
            Ok(p) => p.into_iter(),
            Err(e) => {
                log::error!("prediction failed: {e}");
                return vec![Boundaries::new(); merged.len()];
            }
        };
        merged
            .iter()
            .map(|m| {
                if m.is_empty() {
                    Boundaries::new()
                } else {
                    let p = predictions.next().expect("one prediction per string");
                    char_to_byte(m, &p.boundaries)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::heuristic_split;

    fn b(v: &[usize]) -> Boundaries {
        v.iter().copied().collect()
    }

    fn zero_model(cell: CellKind) -> RnnModel {
        let manifest = ModelManifest::new(cell, 4);
        let params = ParamSet::zeros(&manifest.architecture());
        RnnModel::new(manifest, params).unwrap()
    }

    #[test]
    fn encode_examples() {
        let m = ModelManifest::new(CellKind::Lstm, 8);
        let e = encode("foobar", &b(&[3]), &m).unwrap();
        assert_eq!(e.mask, 6);
        let mut expect = [0.0f32; 40];
        expect[3] = 1.0;
        assert_eq!(e.labels.data(), &expect[..]);
        assert_eq!(e.one_hot.shape(), [40, 37]);
        assert_eq!(e.one_hot.data()[5], 1.0); // 'f'
        assert_eq!(e.one_hot.data().iter().sum::<f32>(), 6.0);

        let e = encode("a", &Boundaries::new(), &m).unwrap();
        assert_eq!(e.mask, 1);
        assert!(e.labels.data().iter().all(|v| *v == 0.0));

        let e = encode("naïve", &Boundaries::new(), &m).unwrap();
        assert_eq!(e.mask, 5);
        assert_eq!(e.one_hot.data()[2 * 37 + m.oov_index()], 1.0);

        assert!(matches!(encode("", &Boundaries::new(), &m), Err(Error::Empty(_))));
        assert!(encode(&"x".repeat(41), &Boundaries::new(), &m).is_err());
    }

    #[test]
    fn alphabet_is_fixed_and_distinct() {
        let m = ModelManifest::new(CellKind::Gru, 8);
        assert_eq!(m.alphabet.len(), 37);
        assert_eq!(m.symbol_index('a'), 0);
        assert_eq!(m.symbol_index('9'), 35);
        assert_eq!(m.symbol_index('_'), 36);
        assert_eq!(m.symbol_index(OOV), 36);
        let mut bad = m.clone();
        bad.alphabet[1] = 'a';
        assert!(bad.validate().is_err());
    }

    #[test]
    fn untrained_model_never_splits() {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            let model = zero_model(cell);
            let p = model.predict("foobar").unwrap();
            assert_eq!(p.probs, vec![0.5; 6]);
            assert!(p.boundaries.is_empty());
            assert!(model.predict("x").unwrap().boundaries.is_empty());
            assert!(model.predict("").is_err());
        }
    }

    #[test]
    fn split_text_keeps_heuristic_boundaries() {
        let model = zero_model(CellKind::Lstm);
        assert_eq!(model.split_text("foo_bar"), ["foo", "bar"]);
        assert!(model.split_text("").is_empty());
        assert_eq!(model.split_text("getHTTPResponse"), heuristic_split("getHTTPResponse"));
    }

    #[test]
    fn windows_cover_long_inputs() {
        assert_eq!(window_starts(40, 40), [0]);
        assert_eq!(window_starts(41, 40), [0, 1]);
        assert_eq!(window_starts(100, 40), [0, 20, 40, 60]);
        assert_eq!(window_starts(75, 40), [0, 20, 35]);
        let model = zero_model(CellKind::Gru);
        let p = model.predict(&"ab".repeat(50)).unwrap();
        assert_eq!(p.probs.len(), 100);
        assert!(p.probs.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn batch_prediction_matches_single() {
        use rand::SeedableRng;
        let manifest = ModelManifest::new(CellKind::Lstm, 6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let params = ParamSet::init(&manifest.architecture(), &mut rng).unwrap();
        let model = RnnModel::new(manifest, params).unwrap();
        let texts = ["getvalue", "x", &"loremipsum".repeat(6), "a1b2"];
        let batch = model.predict_batch(&texts).unwrap();
        for (t, p) in texts.iter().zip(&batch) {
            let single = model.predict(t).unwrap();
            for (a, b) in single.probs.iter().zip(&p.probs) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn byte_offsets_for_non_ascii() {
        assert_eq!(char_to_byte("naïve", &b(&[3])), b(&[4]));
        assert_eq!(char_to_byte("abc", &b(&[1])), b(&[1]));
    }
}
