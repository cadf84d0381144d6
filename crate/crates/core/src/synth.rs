//! Synthetic conversations with lagged, partly corrupted hotspot evidence, and
//! the `hfl-1` JSON-lines corpus format.
//!
//! Every modality has a fixed orthonormal class codebook. Global content rows
//! carry a weak copy of the utterance's prototype; the strong copy lands in the
//! hotspot sequence at a random lag (or not at all when corrupted).

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hgf::ModalPair;
use crate::par::Parallelism;
use crate::tensor::Tensor;
use crate::Modality;

pub const FORMAT: &str = "hfl-1";

const DIALOGUE_STREAM: u64 = 1 << 40;
const PROTOTYPE_STREAM: u64 = 1 << 41;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub dialogues: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub dim_t: usize,
    pub dim_a: usize,
    pub dim_v: usize,
    /// Hotspot signal gain.
    pub gamma: f64,
    /// Content signal gain.
    pub beta: f64,
    /// Noise standard deviation.
    pub sigma: f64,
    /// Largest absolute utterance offset of hotspot evidence.
    pub lag: usize,
    /// Probability that a modality's hotspot evidence is dropped.
    pub rho: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { classes: 6, dialogues: 500, len_min: 6, len_max: 12, dim_t: 16, dim_a: 16, dim_v: 16, gamma: 3.0, beta: 0.5, sigma: 1.0, lag: 1, rho: 0.3, seed: 0 }
    }
}

impl SynthSpec {
    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.dim_t,
            Modality::Audio => self.dim_a,
            Modality::Video => self.dim_v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Spec(msg));
        if self.classes < 2 {
            return fail(format!("need at least two classes, got {}", self.classes));
        }
        if let Some(m) = Modality::ALL.iter().find(|&&m| self.dim(m) < self.classes) {
            return fail(format!("{} classes do not fit in the {}-dimensional {m} codebook", self.classes, self.dim(*m)));
        }
        if self.dialogues == 0 || self.len_min == 0 || self.len_min > self.len_max {
            return fail(format!("need dialogues ≥ 1 and 1 ≤ len_min ≤ len_max (got {}, [{}, {}])", self.dialogues, self.len_min, self.len_max));
        }
        if !(self.gamma > 0.0 && self.beta >= 0.0 && self.beta < self.gamma && self.gamma.is_finite()) {
            return fail(format!("need 0 ≤ beta < gamma (got beta={}, gamma={})", self.beta, self.gamma));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return fail(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        Ok(())
    }
}

/// One conversation: labels and `(content, hotspot)` per modality in T, A, V order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub labels: Vec<usize>,
    pub modalities: Vec<ModalPair>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pair(&self, m: Modality) -> &ModalPair {
        &self.modalities[m.index()]
    }
}

/// Generator choices for one dialogue, indexed `[modality][utterance]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub lags: Vec<Vec<i64>>,
    pub corrupted: Vec<Vec<bool>>,
}

impl Trace {
    /// Row of the hotspot sequence that received utterance `t`'s evidence.
    pub fn target_row(&self, m: Modality, t: usize, len: usize) -> usize {
        (t as i64 + self.lags[m.index()][t]).clamp(0, len as i64 - 1) as usize
    }
}

/// `C×d` orthonormal class prototypes per modality.
pub fn prototypes(spec: &SynthSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    Modality::ALL
        .iter()
        .map(|&m| {
            let d = spec.dim(m);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(PROTOTYPE_STREAM | m.index() as u64);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
            while basis.len() < spec.classes {
                let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    basis.push(v.into_iter().map(|x| x / norm).collect());
                }
            }
            Tensor::from_rows(&basis)
        })
        .collect()
}

pub fn generate(spec: &SynthSpec, par: Parallelism) -> Result<Vec<Dialogue>> {
    Ok(generate_traced(spec, par)?.into_iter().map(|(d, _)| d).collect())
}

/// Generates the corpus together with each dialogue's lag and corruption draws.
pub fn generate_traced(spec: &SynthSpec, par: Parallelism) -> Result<Vec<(Dialogue, Trace)>> {
    let protos = prototypes(spec)?;
    par.map_range(spec.dialogues, |i| generate_one(spec, &protos, i)).into_iter().collect()
}

fn generate_one(spec: &SynthSpec, protos: &[Tensor], index: usize) -> Result<(Dialogue, Trace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(DIALOGUE_STREAM | index as u64);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Spec(e.to_string()))?;
    let len = rng.gen_range(spec.len_min..=spec.len_max);
    let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.classes)).collect();
    let mut modalities = Vec::with_capacity(3);
    let mut trace = Trace { lags: Vec::new(), corrupted: Vec::new() };
    for &m in &Modality::ALL {
        let d = spec.dim(m);
        let proto = &protos[m.index()];
        let mut content: Vec<f64> = (0..len * d).map(|_| noise.sample(&mut rng)).collect();
        let mut hotspot: Vec<f64> = (0..len * d).map(|_| noise.sample(&mut rng)).collect();
        let lag = spec.lag as i64;
        let lags: Vec<i64> = (0..len).map(|_| rng.gen_range(-lag..=lag)).collect();
        let corrupted: Vec<bool> = (0..len).map(|_| rng.gen_bool(spec.rho)).collect();
        for (t, &y) in labels.iter().enumerate() {
            for (j, p) in proto.row(y).iter().enumerate() {
                content[t * d + j] += spec.beta * p;
            }
            if !corrupted[t] {
                let row = (t as i64 + lags[t]).clamp(0, len as i64 - 1) as usize;
                for (j, p) in proto.row(y).iter().enumerate() {
                    hotspot[row * d + j] += spec.gamma * p;
                }
            }
        }
        modalities.push(ModalPair::new(m, Tensor::new(vec![len, d], content)?, Tensor::new(vec![len, d], hotspot)?)?);
        trace.lags.push(lags);
        trace.corrupted.push(corrupted);
    }
    Ok((Dialogue { id: format!("d{index:05}"), labels, modalities }, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub classes: usize,
    pub dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SynthSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "A")]
    pub a: usize,
    #[serde(rename = "V")]
    pub v: usize,
}

impl Dims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.t,
            Modality::Audio => self.a,
            Modality::Video => self.v,
        }
    }
}

impl Header {
    pub fn for_spec(spec: &SynthSpec) -> Self {
        Self { format: FORMAT.into(), classes: spec.classes, dims: Dims { t: spec.dim_t, a: spec.dim_a, v: spec.dim_v }, spec: Some(spec.clone()) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: Header,
    pub dialogues: Vec<Dialogue>,
}

fn push_matrix(out: &mut String, t: &Tensor) {
    out.push('[');
    for r in 0..t.rows() {
        if r > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, v) in t.row(r).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("string write");
        }
        out.push(']');
    }
    out.push(']');
}

fn dialogue_line(d: &Dialogue) -> Result<String> {
    let mut line = String::new();
    write!(line, "{{\"id\":{},\"length\":{},\"labels\":{}", serde_json::to_string(&d.id)?, d.len(), serde_json::to_string(&d.labels)?).expect("string write");
    for pair in &d.modalities {
        if pair.content.data().iter().chain(pair.hotspot.data()).any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("dialogue {} holds non-finite features", d.id)));
        }
        write!(line, ",\"{}\":{{\"content\":", pair.modality).expect("string write");
        push_matrix(&mut line, &pair.content);
        line.push_str(",\"hotspot\":");
        push_matrix(&mut line, &pair.hotspot);
        line.push('}');
    }
    line.push('}');
    Ok(line)
}

pub fn write_corpus_to(corpus: &Corpus, mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(&corpus.header)?)?;
    for d in &corpus.dialogues {
        writeln!(out, "{}", dialogue_line(d)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_corpus_to(corpus, BufWriter::new(std::fs::File::create(path)?))
}

#[derive(Deserialize)]
struct RawPair {
    content: Vec<Vec<f64>>,
    hotspot: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialogue {
    id: String,
    length: usize,
    labels: Vec<usize>,
    #[serde(rename = "T")]
    t: RawPair,
    #[serde(rename = "A")]
    a: RawPair,
    #[serde(rename = "V")]
    v: RawPair,
}

fn matrix(rows: Vec<Vec<f64>>, len: usize, dim: usize, what: &str) -> Result<Tensor> {
    if rows.len() != len || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Schema(format!("{what}: expected {len}×{dim}")));
    }
    Tensor::new(vec![len, dim], rows.into_iter().flatten().collect())
}

pub fn read_corpus_from(input: impl BufRead) -> Result<Corpus> {
    let mut lines = input.lines().enumerate();
    let header_text = match lines.next() {
        Some((_, l)) => l?,
        None => return Err(Error::Parse { line: 1, message: "empty corpus file".into() }),
    };
    let header: Header = serde_json::from_str(&header_text).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if header.format != FORMAT {
        return Err(Error::Schema(format!("unsupported format `{}` (expected {FORMAT})", header.format)));
    }
    let mut dialogues = Vec::new();
    for (i, text) in lines {
        let line = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let raw: RawDialogue = serde_json::from_str(&text).map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let schema = |e: Error| match e {
            Error::Schema(m) => Error::Schema(format!("line {line}: {m}")),
            other => other,
        };
        if raw.labels.len() != raw.length || raw.length == 0 {
            return Err(Error::Schema(format!("line {line}: {} labels for length {}", raw.labels.len(), raw.length)));
        }
        if let Some(y) = raw.labels.iter().find(|&&y| y >= header.classes) {
            return Err(Error::Schema(format!("line {line}: label {y} outside {} classes", header.classes)));
        }
        let mut modalities = Vec::with_capacity(3);
        for (m, pair) in Modality::ALL.into_iter().zip([raw.t, raw.a, raw.v]) {
            let dim = header.dims.get(m);
            let content = matrix(pair.content, raw.length, dim, &format!("{m} content")).map_err(schema)?;
            let hotspot = matrix(pair.hotspot, raw.length, dim, &format!("{m} hotspot")).map_err(schema)?;
            modalities.push(ModalPair::new(m, content, hotspot)?);
        }
        dialogues.push(Dialogue { id: raw.id, labels: raw.labels, modalities });
    }
    Ok(Corpus { header, dialogues })
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    read_corpus_from(BufReader::new(std::fs::File::open(path)?))
}

pub type Split = (Vec<Dialogue>, Vec<Dialogue>, Vec<Dialogue>);

/// Seeded dialogue-level split into train, dev and test.
pub fn split(dialogues: &[Dialogue], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = dialogues.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_dev = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dialogues[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..n_train + n_dev]), pick(&order[n_train + n_dev..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthSpec {
        SynthSpec { dialogues: 12, len_min: 2, len_max: 5, dim_t: 6, dim_a: 7, dim_v: 6, classes: 4, seed: 5, ..SynthSpec::default() }
    }

    fn serialize(c: &Corpus) -> Vec<u8> {
        let mut buf = Vec::new();
        write_corpus_to(c, &mut buf).unwrap();
        buf
    }

    #[test]
    fn rejects_degenerate_specs() {
        for bad in [
            SynthSpec { classes: 20, ..SynthSpec::default() },
            SynthSpec { beta: 3.0, ..SynthSpec::default() },
            SynthSpec { sigma: 0.0, ..SynthSpec::default() },
            SynthSpec { rho: 1.0, ..SynthSpec::default() },
            SynthSpec { len_min: 5, len_max: 4, ..SynthSpec::default() },
        ] {
            assert!(matches!(generate(&bad, Parallelism::Sequential), Err(Error::Spec(_))), "{bad:?}");
        }
    }

    #[test]
    fn prototypes_are_orthonormal() {
        for p in prototypes(&SynthSpec::default()).unwrap() {
            for i in 0..p.rows() {
                for j in 0..p.rows() {
                    let dot: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
                    assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn noiseless_hotspots_are_exact_prototypes() {
        let spec = SynthSpec { lag: 0, rho: 0.0, sigma: 1e-300, beta: 0.0, ..tiny() };
        let protos = prototypes(&spec).unwrap();
        for d in generate(&spec, Parallelism::Sequential).unwrap() {
            for pair in &d.modalities {
                for (t, &y) in d.labels.iter().enumerate() {
                    let expect: Vec<f64> = protos[pair.modality.index()].row(y).iter().map(|p| spec.gamma * p).collect();
                    for (a, b) in pair.hotspot.row(t).iter().zip(&expect) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_and_parallel_safe() {
        let spec = tiny();
        let header = Header::for_spec(&spec);
        let a = Corpus { header: header.clone(), dialogues: generate(&spec, Parallelism::Sequential).unwrap() };
        let b = Corpus { header, dialogues: generate(&spec, Parallelism::Rayon).unwrap() };
        assert_eq!(serialize(&a), serialize(&b));
        let other = generate(&SynthSpec { seed: 6, ..spec }, Parallelism::Sequential).unwrap();
        assert_ne!(a.dialogues, other);
    }

    #[test]
    fn round_trip_is_exact() {
        let spec = tiny();
        let corpus = Corpus { header: Header::for_spec(&spec), dialogues: generate(&spec, Parallelism::Sequential).unwrap() };
        let bytes = serialize(&corpus);
        let back = read_corpus_from(bytes.as_slice()).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn format_violations() {
        let spec = tiny();
        let corpus = Corpus { header: Header::for_spec(&spec), dialogues: generate(&spec, Parallelism::Sequential).unwrap() };
        let text = String::from_utf8(serialize(&corpus)).unwrap();

        let wrong_version = text.replacen("hfl-1", "hfl-2", 1);
        assert!(matches!(read_corpus_from(wrong_version.as_bytes()), Err(Error::Schema(_))));

        let truncated = &text[..text.len() - 40];
        match read_corpus_from(truncated.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 13),
            other => panic!("{other:?}"),
        }

        let mut lines: Vec<&str> = text.lines().collect();
        let header = lines[0].replace("\"T\":6", "\"T\":5");
        lines[0] = &header;
        assert!(matches!(read_corpus_from(lines.join("\n").as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn split_contract() {
        let d = generate(&tiny(), Parallelism::Sequential).unwrap();
        let (tr, dv, te) = split(&d, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (12, 0, 0));
        let a = split(&d, [0.5, 0.25, 0.25], 3).unwrap();
        assert_eq!(a, split(&d, [0.5, 0.25, 0.25], 3).unwrap());
        let mut ids: Vec<&str> = a.0.iter().chain(&a.1).chain(&a.2).map(|d| d.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 12);
        assert!(split(&d, [0.5, 0.6, 0.0], 1).is_err());
    }
}
