//! Synthetic two-modality multi-label datasets, missing-pattern simulation,
//! and JSONL ingestion.
//!
//! Samples always carry both modality fields; a missing modality holds a
//! canonical dummy (zero patch grid, all-pad token sequence) so the token
//! budget downstream is unchanged, and the [`MissingPattern`] records which
//! fields are real.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::MissingPattern;
use crate::error::{Error, Result};

/// Shapes shared by every sample of a dataset; derived from the model
/// configuration that will consume the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataGeometry {
    pub patches: usize,
    pub patch_dim: usize,
    pub text_len: usize,
    pub vocab_size: usize,
}

impl DataGeometry {
    pub fn image_len(&self) -> usize {
        self.patches * self.patch_dim
    }
}

/// One patient-analog record: an image patch grid, a token sequence, the
/// missing pattern, and a binary multi-label target vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub text: Vec<u32>,
    pub pattern: MissingPattern,
    pub labels: Vec<u8>,
}

impl Sample {
    /// Re-assigns the pattern, installing canonical dummies for the missing
    /// modalities. Present-modality contents and labels are untouched.
    pub fn set_pattern(&mut self, pattern: MissingPattern, geom: &DataGeometry) {
        if !pattern.has_image() {
            self.image = dummy_image(geom);
        }
        if !pattern.has_text() {
            self.text = dummy_text(geom);
        }
        self.pattern = pattern;
    }
}

pub fn dummy_image(geom: &DataGeometry) -> Vec<f64> {
    vec![0.0; geom.image_len()]
}

pub fn dummy_text(geom: &DataGeometry) -> Vec<u32> {
    vec![0; geom.text_len]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub geom: DataGeometry,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.samples.first().map_or(0, |s| s.labels.len())
    }

    /// (complete, image-only, text-only) counts.
    pub fn pattern_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for s in &self.samples {
            match s.pattern {
                MissingPattern::COMPLETE => counts.0 += 1,
                MissingPattern::IMAGE_ONLY => counts.1 += 1,
                _ => counts.2 += 1,
            }
        }
        counts
    }

    /// Fraction of samples missing at least one modality.
    pub fn missing_rate(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let (complete, _, _) = self.pattern_counts();
        (self.len() - complete) as f64 / self.len() as f64
    }
}

/// Per-modality availability rates. The constraint `avail_img + avail_txt >= 1`
/// guarantees no sample loses both modalities.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingSpec {
    pub avail_img: f64,
    pub avail_txt: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MissingSpec {
    pub fn new(avail_img: f64, avail_txt: f64, seed: u64) -> Result<Self> {
        let spec = MissingSpec {
            avail_img,
            avail_txt,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("avail_img", self.avail_img), ("avail_txt", self.avail_txt)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!(
                    "{name} must lie in (0, 1], got {a}"
                )));
            }
        }
        if self.avail_img + self.avail_txt < 1.0 {
            return Err(Error::Config(format!(
                "infeasible missing spec: avail_img + avail_txt = {} < 1 would leave samples with no modality",
                self.avail_img + self.avail_txt
            )));
        }
        Ok(())
    }

    /// Total missing rate implied by the availabilities.
    pub fn missing_rate(&self) -> f64 {
        2.0 - self.avail_img - self.avail_txt
    }

    /// Symmetric availabilities for a target total missing rate.
    pub fn symmetric(eta: f64, seed: u64) -> Result<Self> {
        MissingSpec::new(1.0 - eta / 2.0, 1.0 - eta / 2.0, seed)
    }
}

/// Knobs of the synthetic task: per-label prevalence, how strongly each
/// modality carries the labels, and the noise floor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_labels: usize,
    pub prevalence: Vec<f64>,
    pub image_signal: f64,
    pub text_signal: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub vocab_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    1.0
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels == 0 {
            return Err(Error::Config("num_labels must be >= 1".into()));
        }
        if self.prevalence.len() != self.num_labels {
            return Err(Error::Config(format!(
                "prevalence has {} entries for {} labels",
                self.prevalence.len(),
                self.num_labels
            )));
        }
        if self.prevalence.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Config("each prevalence must lie in (0, 1)".into()));
        }
        if self.image_signal < 0.0 || self.text_signal < 0.0 || self.noise < 0.0 {
            return Err(Error::Config("signal strengths and noise must be >= 0".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2 (id 0 is the pad token)".into()));
        }
        if self.num_labels > self.vocab_size - 1 {
            return Err(Error::Config(format!(
                "vocab_size {} cannot host {} distinct label signal tokens",
                self.vocab_size, self.num_labels
            )));
        }
        Ok(())
    }
}

/// The non-pad token that carries label `l`'s text signal.
fn signal_token(label: usize, vocab_size: usize) -> u32 {
    (1 + label % (vocab_size - 1)) as u32
}

/// Draws `n` modality-complete samples. Labels are independent Bernoulli
/// draws per prevalence; image patches sit on label-dependent unit mean
/// directions scaled by `image_signal` plus Gaussian noise; text tokens come
/// from a categorical tilted by `exp(text_signal)` towards the signal tokens
/// of the active labels. Deterministic under the task seed.
pub fn generate_synthetic(task: &SyntheticTaskSpec, geom: &DataGeometry, n: usize) -> Result<Dataset> {
    task.validate()?;
    if n == 0 {
        return Err(Error::Config("cannot generate an empty dataset".into()));
    }
    if task.vocab_size > geom.vocab_size {
        return Err(Error::Config(format!(
            "task vocab {} exceeds model vocab {}",
            task.vocab_size, geom.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let unit_normal = Normal::new(0.0, 1.0).expect("unit normal is valid");

    // Fixed per-task label directions in image space, unit length.
    let image_len = geom.image_len();
    let directions: Vec<Vec<f64>> = (0..task.num_labels)
        .map(|_| {
            let mut v: Vec<f64> = (0..image_len).map(|_| unit_normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect();

    let tilt = task.text_signal.exp();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let labels: Vec<u8> = task
            .prevalence
            .iter()
            .map(|&p| (rng.random::<f64>() < p) as u8)
            .collect();

        let mut image = vec![0.0; image_len];
        for (l, &y) in labels.iter().enumerate() {
            if y == 1 {
                for (px, dx) in image.iter_mut().zip(&directions[l]) {
                    *px += task.image_signal * dx;
                }
            }
        }
        for px in image.iter_mut() {
            *px += task.noise * unit_normal.sample(&mut rng);
        }

        // Token weights over the non-pad vocabulary [1, vocab).
        let mut weights = vec![1.0; task.vocab_size - 1];
        for (l, &y) in labels.iter().enumerate() {
            if y == 1 {
                weights[signal_token(l, task.vocab_size) as usize - 1] = tilt;
            }
        }
        let total: f64 = weights.iter().sum();
        let text: Vec<u32> = (0..geom.text_len)
            .map(|_| {
                let mut draw = rng.random::<f64>() * total;
                let mut tok = 1u32;
                for (i, &w) in weights.iter().enumerate() {
                    draw -= w;
                    if draw <= 0.0 {
                        tok = (i + 1) as u32;
                        break;
                    }
                }
                tok
            })
            .collect();

        samples.push(Sample {
            image,
            text,
            pattern: MissingPattern::COMPLETE,
            labels,
        });
    }
    Ok(Dataset {
        geom: *geom,
        samples,
    })
}

/// Largest-remainder apportionment of `n` items across fractions.
fn largest_remainder(fractions: &[f64], n: usize) -> Vec<usize> {
    let ideal: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in 0..n.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Assigns missing patterns at the exact largest-remainder counts implied by
/// the availabilities (complete = img + txt - 1, image-only = 1 - txt,
/// text-only = 1 - img) via a seeded shuffle, installing dummy fields for
/// the dropped modalities. Labels and kept contents are unchanged.
pub fn apply_missing(ds: &Dataset, spec: &MissingSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = ds.len();
    let fractions = [
        spec.avail_img + spec.avail_txt - 1.0,
        1.0 - spec.avail_txt,
        1.0 - spec.avail_img,
    ];
    let counts = largest_remainder(&fractions, n);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let mut out = ds.clone();
    for (slot, &idx) in order.iter().enumerate() {
        let pattern = if slot < counts[0] {
            MissingPattern::COMPLETE
        } else if slot < counts[0] + counts[1] {
            MissingPattern::IMAGE_ONLY
        } else {
            MissingPattern::TEXT_ONLY
        };
        out.samples[idx].set_pattern(pattern, &ds.geom);
    }
    Ok(out)
}

/// Seed-deterministic stratified split: within each pattern group the
/// samples are shuffled and apportioned by largest remainder, then each
/// split is restored to original dataset order.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config("split fractions must be >= 0".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {total}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for pattern in [
        MissingPattern::COMPLETE,
        MissingPattern::IMAGE_ONLY,
        MissingPattern::TEXT_ONLY,
    ] {
        let mut group: Vec<usize> = ds
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.pattern == pattern)
            .map(|(i, _)| i)
            .collect();
        if group.is_empty() {
            continue;
        }
        group.shuffle(&mut rng);
        let counts = largest_remainder(&fractions, group.len());
        let mut cursor = 0;
        for (split_idx, &c) in counts.iter().enumerate() {
            picks[split_idx].extend_from_slice(&group[cursor..cursor + c]);
            cursor += c;
        }
    }

    let build = |mut indices: Vec<usize>| -> Dataset {
        indices.sort_unstable();
        Dataset {
            geom: ds.geom,
            samples: indices.iter().map(|&i| ds.samples[i].clone()).collect(),
        }
    };
    let [train, val, test] = picks;
    Ok((build(train), build(val), build(test)))
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    image: Option<Vec<f64>>,
    text: Option<Vec<u32>>,
    labels: Vec<u8>,
}

/// Writes one JSON object per line; a missing modality is `null`.
pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for s in &ds.samples {
        let record = JsonlRecord {
            image: s.pattern.has_image().then(|| s.image.clone()),
            text: s.pattern.has_text().then(|| s.text.clone()),
            labels: s.labels.clone(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a JSONL dataset, validating every line against the geometry.
/// `null` fields clear the corresponding pattern bit and install dummies.
pub fn load_jsonl(path: &Path, geom: &DataGeometry) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    let mut labels_dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Ingestion(format!("line {line_no}: malformed record: {e}")))?;

        let pattern = MissingPattern::new(record.image.is_some(), record.text.is_some())
            .map_err(|_| {
                Error::Ingestion(format!("line {line_no}: both modalities are null"))
            })?;
        if let Some(image) = &record.image {
            if image.len() != geom.image_len() {
                return Err(Error::Ingestion(format!(
                    "line {line_no}: image has {} values, expected {}",
                    image.len(),
                    geom.image_len()
                )));
            }
            if !image.iter().all(|v| v.is_finite()) {
                return Err(Error::Ingestion(format!("line {line_no}: non-finite image value")));
            }
        }
        if let Some(text) = &record.text {
            if text.len() > geom.text_len {
                return Err(Error::Ingestion(format!(
                    "line {line_no}: text has {} tokens, max is {}",
                    text.len(),
                    geom.text_len
                )));
            }
            if let Some(bad) = text.iter().find(|&&t| t as usize >= geom.vocab_size) {
                return Err(Error::Ingestion(format!(
                    "line {line_no}: token id {bad} is outside the vocabulary of {}",
                    geom.vocab_size
                )));
            }
        }
        if let Some(bad) = record.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Ingestion(format!(
                "line {line_no}: label entry {bad} is not binary"
            )));
        }
        match labels_dim {
            None => labels_dim = Some(record.labels.len()),
            Some(dim) if dim != record.labels.len() => {
                return Err(Error::Ingestion(format!(
                    "line {line_no}: {} labels, expected {dim}",
                    record.labels.len()
                )));
            }
            _ => {}
        }

        samples.push(Sample {
            image: record.image.unwrap_or_else(|| dummy_image(geom)),
            text: record.text.unwrap_or_else(|| dummy_text(geom)),
            pattern,
            labels: record.labels,
        });
    }
    if samples.is_empty() {
        return Err(Error::Ingestion(format!("{} holds no samples", path.display())));
    }
    Ok(Dataset {
        geom: *geom,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_geom() -> DataGeometry {
        DataGeometry {
            patches: 4,
            patch_dim: 6,
            text_len: 8,
            vocab_size: 24,
        }
    }

    fn task(image_signal: f64, text_signal: f64, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            num_labels: 4,
            prevalence: vec![0.4, 0.35, 0.3, 0.25],
            image_signal,
            text_signal,
            noise: 1.0,
            vocab_size: 24,
            seed,
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let geom = tiny_geom();
        let a = generate_synthetic(&task(1.0, 1.0, 5), &geom, 50).unwrap();
        let b = generate_synthetic(&task(1.0, 1.0, 5), &geom, 50).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&task(1.0, 1.0, 6), &geom, 50).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let geom = tiny_geom();
        let mut bad = task(1.0, 1.0, 0);
        bad.prevalence[0] = 0.0;
        assert!(generate_synthetic(&bad, &geom, 10).is_err());
        let mut bad = task(1.0, 1.0, 0);
        bad.vocab_size = 3; // 4 labels cannot get distinct signal tokens
        assert!(generate_synthetic(&bad, &geom, 10).is_err());
        assert!(generate_synthetic(&task(1.0, 1.0, 0), &geom, 0).is_err());
    }

    #[test]
    fn apply_missing_exact_counts_and_eta() {
        let geom = tiny_geom();
        let ds = generate_synthetic(&task(1.0, 1.0, 1), &geom, 1000).unwrap();

        let spec = MissingSpec::new(0.65, 0.65, 3).unwrap();
        let out = apply_missing(&ds, &spec).unwrap();
        assert_eq!(out.pattern_counts(), (300, 350, 350));
        assert_eq!(out.missing_rate(), 0.70);

        let spec = MissingSpec::new(1.0, 0.30, 3).unwrap();
        let out = apply_missing(&ds, &spec).unwrap();
        assert_eq!(out.pattern_counts(), (300, 700, 0));

        let spec = MissingSpec::new(1.0, 1.0, 3).unwrap();
        let out = apply_missing(&ds, &spec).unwrap();
        assert_eq!(out.pattern_counts(), (1000, 0, 0));
    }

    #[test]
    fn apply_missing_preserves_labels_and_present_contents() {
        let geom = tiny_geom();
        let ds = generate_synthetic(&task(1.0, 1.0, 2), &geom, 200).unwrap();
        let out = apply_missing(&ds, &MissingSpec::new(0.7, 0.6, 9).unwrap()).unwrap();
        for (orig, new) in ds.samples.iter().zip(&out.samples) {
            assert_eq!(orig.labels, new.labels);
            if new.pattern.has_image() {
                assert_eq!(orig.image, new.image);
            } else {
                assert!(new.image.iter().all(|&v| v == 0.0));
            }
            if new.pattern.has_text() {
                assert_eq!(orig.text, new.text);
            } else {
                assert!(new.text.iter().all(|&t| t == 0));
            }
        }
        // Count identity: groups partition the dataset.
        let (c, io, to) = out.pattern_counts();
        assert_eq!(c + io + to, out.len());
    }

    #[test]
    fn infeasible_missing_spec_is_an_error() {
        assert!(MissingSpec::new(0.4, 0.5, 0).is_err());
        assert!(MissingSpec::new(0.0, 1.0, 0).is_err());
        assert!(MissingSpec::new(1.0, 1.5, 0).is_err());
    }

    #[test]
    fn split_everything_into_train_returns_the_dataset() {
        let geom = tiny_geom();
        let ds = generate_synthetic(&task(1.0, 1.0, 3), &geom, 60).unwrap();
        let (train, val, test) = split(&ds, [1.0, 0.0, 0.0], 7).unwrap();
        assert_eq!(train, ds);
        assert!(val.is_empty());
        assert!(test.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_stratified() {
        let geom = tiny_geom();
        let ds = generate_synthetic(&task(1.0, 1.0, 4), &geom, 200).unwrap();
        let ds = apply_missing(&ds, &MissingSpec::new(0.65, 0.65, 5).unwrap()).unwrap();

        let (t1, v1, s1) = split(&ds, [0.7, 0.15, 0.15], 11).unwrap();
        let (t2, v2, s2) = split(&ds, [0.7, 0.15, 0.15], 11).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(s1, s2);

        assert_eq!(t1.len() + v1.len() + s1.len(), ds.len());

        // Per-pattern proportions stay within one sample of exact.
        let total = ds.pattern_counts();
        for (part, frac) in [(&t1, 0.7), (&v1, 0.15), (&s1, 0.15)] {
            let got = part.pattern_counts();
            for (g, t) in [(got.0, total.0), (got.1, total.1), (got.2, total.2)] {
                let exact = frac * t as f64;
                assert!(
                    (g as f64 - exact).abs() <= 1.0,
                    "stratification off: got {g}, exact {exact}"
                );
            }
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let geom = tiny_geom();
        let ds = generate_synthetic(&task(1.0, 1.0, 3), &geom, 10).unwrap();
        assert!(split(&ds, [0.5, 0.2, 0.2], 0).is_err());
        assert!(split(&ds, [1.2, -0.1, -0.1], 0).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let geom = tiny_geom();
        let ds = generate_synthetic(&task(0.8, 1.5, 6), &geom, 80).unwrap();
        let ds = apply_missing(&ds, &MissingSpec::new(0.7, 0.7, 8).unwrap()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_jsonl(&ds, &path).unwrap();
        let loaded = load_jsonl(&path, &geom).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn jsonl_null_text_sets_image_only_pattern() {
        let geom = tiny_geom();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        let image: Vec<String> = (0..geom.image_len()).map(|i| format!("{}.0", i)).collect();
        std::fs::write(
            &path,
            format!("{{\"image\":[{}],\"text\":null,\"labels\":[1,0]}}\n", image.join(",")),
        )
        .unwrap();
        let ds = load_jsonl(&path, &geom).unwrap();
        assert_eq!(ds.samples[0].pattern, MissingPattern::IMAGE_ONLY);
        assert_eq!(ds.samples[0].text, dummy_text(&geom));
    }

    #[test]
    fn jsonl_errors_name_the_offending_line() {
        let geom = tiny_geom();
        let dir = tempfile::tempdir().unwrap();

        let path = dir.path().join("bad_label.jsonl");
        let image: Vec<String> = (0..geom.image_len()).map(|_| "0.0".into()).collect();
        let good = format!("{{\"image\":[{}],\"text\":[1,2],\"labels\":[1,0]}}", image.join(","));
        let bad = format!("{{\"image\":[{}],\"text\":[1,2],\"labels\":[2,0]}}", image.join(","));
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let err = load_jsonl(&path, &geom).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("not binary"), "{err}");

        let path = dir.path().join("both_null.jsonl");
        std::fs::write(&path, "{\"image\":null,\"text\":null,\"labels\":[1]}\n").unwrap();
        let err = load_jsonl(&path, &geom).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("both modalities"), "{err}");
    }

    // ── label-signal oracle probes ───────────────────────────────────

    /// One-vs-rest logistic probe trained by full-batch gradient descent.
    fn logistic_probe_f1(
        train_x: &[Vec<f64>],
        train_y: &[Vec<u8>],
        test_x: &[Vec<f64>],
        test_y: &[Vec<u8>],
    ) -> f64 {
        let dim = train_x[0].len();
        let labels = train_y[0].len();
        let n = train_x.len() as f64;
        let mut f1_sum = 0.0;
        for l in 0..labels {
            let mut w = vec![0.0; dim];
            let mut b = 0.0;
            for _ in 0..300 {
                let mut gw = vec![0.0; dim];
                let mut gb = 0.0;
                for (x, y) in train_x.iter().zip(train_y) {
                    let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                    let p = 1.0 / (1.0 + (-z).exp());
                    let err = p - y[l] as f64;
                    for (g, xv) in gw.iter_mut().zip(x) {
                        *g += err * xv / n;
                    }
                    gb += err / n;
                }
                for (wv, g) in w.iter_mut().zip(&gw) {
                    *wv -= 0.5 * g;
                }
                b -= 0.5 * gb;
            }
            let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
            for (x, y) in test_x.iter().zip(test_y) {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                let pred = (z >= 0.0) as u8;
                match (pred, y[l]) {
                    (1, 1) => tp += 1.0,
                    (1, 0) => fp += 1.0,
                    (0, 1) => fneg += 1.0,
                    _ => {}
                }
            }
            let denom = 2.0 * tp + fp + fneg;
            f1_sum += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        }
        f1_sum / labels as f64
    }

    fn image_features(ds: &Dataset) -> Vec<Vec<f64>> {
        ds.samples.iter().map(|s| s.image.clone()).collect()
    }

    fn text_features(ds: &Dataset) -> Vec<Vec<f64>> {
        ds.samples
            .iter()
            .map(|s| {
                let mut bag = vec![0.0; ds.geom.vocab_size];
                for &t in &s.text {
                    bag[t as usize] += 1.0;
                }
                bag
            })
            .collect()
    }

    fn labels_of(ds: &Dataset) -> Vec<Vec<u8>> {
        ds.samples.iter().map(|s| s.labels.clone()).collect()
    }

    #[test]
    fn text_signal_dominates_when_image_signal_is_zero() {
        let geom = tiny_geom();
        let ds = generate_synthetic(&task(0.0, 3.0, 13), &geom, 500).unwrap();
        let (train, _, test) = split(&ds, [0.7, 0.0, 0.3], 1).unwrap();
        let (ty, sy) = (labels_of(&train), labels_of(&test));

        let text_f1 = logistic_probe_f1(&text_features(&train), &ty, &text_features(&test), &sy);
        let img_f1 = logistic_probe_f1(&image_features(&train), &ty, &image_features(&test), &sy);
        assert!(
            text_f1 > img_f1 + 0.05,
            "text probe {text_f1} should beat image probe {img_f1}"
        );
    }

    #[test]
    fn zero_signal_matches_label_shuffling_chance_level() {
        let geom = tiny_geom();
        let ds = generate_synthetic(&task(0.0, 0.0, 17), &geom, 600).unwrap();
        let (train, _, test) = split(&ds, [0.6, 0.0, 0.4], 2).unwrap();
        let (ty, sy) = (labels_of(&train), labels_of(&test));

        let probe_f1 = logistic_probe_f1(&text_features(&train), &ty, &text_features(&test), &sy);

        // Chance oracle: the same predictions scored against shuffled truths.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut chance_sum = 0.0;
        let rounds = 40;
        for _ in 0..rounds {
            let mut shuffled = sy.clone();
            shuffled.shuffle(&mut rng);
            chance_sum +=
                logistic_probe_f1(&text_features(&train), &ty, &text_features(&test), &shuffled);
        }
        let chance = chance_sum / rounds as f64;
        assert!(
            (probe_f1 - chance).abs() < 0.12,
            "probe {probe_f1} vs chance {chance}"
        );
    }
}
