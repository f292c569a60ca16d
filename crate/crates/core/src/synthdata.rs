//! Synthetic identity universes and the deep / shallow / long-tail regimes.
//!
//! An identity is a unit latent center in input space. A sample of that
//! identity is the normalized sum of the center, isotropic Gaussian noise and
//! one of a few shared variation transforms applied to the center (a stand-in
//! for pose or age factors common to every identity). A transform rotates the
//! center inside a 2D plane and adds a shared offset, so samples of different
//! identities under the same variation look alike to raw cosine similarity.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{self, l2_normalize, Matrix};
use crate::error::{invalid, Error, Result};
use crate::rngs::{self, LabRng, Stream};

pub const DEFAULT_NOISE_SCALE: f64 = 0.25;
pub const DEFAULT_VARIATIONS: usize = 4;
pub const DEFAULT_VARIATION_STRENGTH: f64 = 2.0;
pub const DEFAULT_DEEP_DEPTH: usize = 44;
/// Maximum absolute cosine between two identity centers.
pub const MAX_CENTER_COS: f64 = 0.95;
/// Largest rotation angle of a variation transform.
pub const MAX_VARIATION_ANGLE: f64 = std::f64::consts::FRAC_PI_2;

const DATA_MAGIC: &str = "masstlab-data";
/// Variation transforms depend only on the input dimension so that disjoint
/// universes (train vs evaluation identities) share the same nuisance factors.
const VARIATION_SEED: u64 = 0x7a_110f_5eed;

/// Rotation by `angle` inside the plane spanned by orthonormal `u`, `w`,
/// followed by a shift of `strength` along the unit vector `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationTransform {
    u: Vec<f64>,
    w: Vec<f64>,
    angle: f64,
    offset: Vec<f64>,
    strength: f64,
}

impl VariationTransform {
    fn random(dim: usize, strength: f64, rng: &mut LabRng) -> Self {
        let u = random_unit(dim, rng);
        let mut w = random_unit(dim, rng);
        let proj = diffcore::dot(&u, &w);
        diffcore::axpy(-proj, &u, &mut w);
        let w = l2_normalize(&w).expect("two random gaussian directions are independent");
        let angle = rng.random_range(-MAX_VARIATION_ANGLE..MAX_VARIATION_ANGLE);
        let offset = random_unit(dim, rng);
        VariationTransform { u, w, angle, offset, strength }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let a = diffcore::dot(&self.u, x);
        let b = diffcore::dot(&self.w, x);
        let (s, c) = self.angle.sin_cos();
        let mut out = x.to_vec();
        diffcore::axpy((c - 1.0) * a - s * b, &self.u, &mut out);
        diffcore::axpy(s * a + (c - 1.0) * b, &self.w, &mut out);
        diffcore::axpy(self.strength, &self.offset, &mut out);
        out
    }
}

fn random_unit(dim: usize, rng: &mut LabRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityUniverse {
    num_ids: usize,
    input_dim: usize,
    centers: Vec<Vec<f64>>,
    noise_scale: f64,
    transforms: Vec<VariationTransform>,
    seed: u64,
}

impl IdentityUniverse {
    pub fn num_ids(&self) -> usize {
        self.num_ids
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn transforms(&self) -> &[VariationTransform] {
        &self.transforms
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One sample of identity `id`.
    pub fn draw_sample(&self, id: usize, rng: &mut LabRng) -> Vec<f64> {
        let center = &self.centers[id];
        let mut x = center.clone();
        for xi in x.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *xi += self.noise_scale * g;
        }
        if !self.transforms.is_empty() {
            let k = rng.random_range(0..self.transforms.len());
            diffcore::axpy(1.0, &self.transforms[k].apply(center), &mut x);
        }
        match l2_normalize(&x) {
            Ok(v) => v,
            Err(_) => center.clone(),
        }
    }
}

/// Knobs of the sample generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniverseParams {
    pub noise_scale: f64,
    pub num_variations: usize,
    pub variation_strength: f64,
}

impl Default for UniverseParams {
    fn default() -> Self {
        UniverseParams {
            noise_scale: DEFAULT_NOISE_SCALE,
            num_variations: DEFAULT_VARIATIONS,
            variation_strength: DEFAULT_VARIATION_STRENGTH,
        }
    }
}

pub fn generate_universe(num_ids: usize, input_dim: usize, seed: u64) -> Result<IdentityUniverse> {
    generate_universe_with(num_ids, input_dim, seed, &UniverseParams::default())
}

pub fn generate_universe_with(
    num_ids: usize,
    input_dim: usize,
    seed: u64,
    params: &UniverseParams,
) -> Result<IdentityUniverse> {
    let UniverseParams { noise_scale, num_variations, variation_strength } = *params;
    if num_ids < 2 {
        return Err(invalid("data.ids", "need at least 2 identities"));
    }
    if input_dim < 2 {
        return Err(invalid("data.dim", "need input_dim >= 2"));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(invalid("data.noise_scale", "must be finite and >= 0"));
    }
    if !(variation_strength >= 0.0 && variation_strength.is_finite()) {
        return Err(invalid("data.variation_strength", "must be finite and >= 0"));
    }
    let mut rng = rngs::stream(seed, Stream::Data);
    let budget = 100 * num_ids;
    let mut resamples = 0usize;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_ids);
    while centers.len() < num_ids {
        let candidate = random_unit(input_dim, &mut rng);
        if centers.iter().all(|c| diffcore::dot(c, &candidate).abs() <= MAX_CENTER_COS) {
            centers.push(candidate);
        } else {
            resamples += 1;
            if resamples > budget {
                return Err(Error::CenterCapacity { num_ids, input_dim });
            }
        }
    }
    let mut vrng = rngs::keyed(VARIATION_SEED, input_dim as u64);
    let transforms =
        (0..num_variations).map(|_| VariationTransform::random(input_dim, variation_strength, &mut vrng)).collect();
    Ok(IdentityUniverse { num_ids, input_dim, centers, noise_scale, transforms, seed })
}

/// Per-identity sample counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    Deep(usize),
    Shallow,
    /// Power-law decay with exponent `r` starting from [`DEFAULT_DEEP_DEPTH`].
    LongTail(f64),
}

impl Regime {
    pub fn counts(&self, num_ids: usize) -> Vec<usize> {
        match *self {
            Regime::Deep(depth) => vec![depth.max(2); num_ids],
            Regime::Shallow => vec![2; num_ids],
            Regime::LongTail(r) => long_tail_counts(DEFAULT_DEEP_DEPTH, num_ids, r),
        }
    }

    fn tag(&self) -> u64 {
        match *self {
            Regime::Deep(d) => 0x1_0000 + d as u64,
            Regime::Shallow => 0x2_0000,
            Regime::LongTail(r) => 0x3_0000 ^ r.to_bits(),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Deep(d) => write!(f, "deep:{d}"),
            Regime::Shallow => write!(f, "shallow"),
            Regime::LongTail(r) => write!(f, "longtail:{r}"),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid("regime", format!("expected deep:<depth>|shallow|longtail:<r>, got `{s}`"));
        match s.split_once(':') {
            None if s == "shallow" => Ok(Regime::Shallow),
            None if s == "deep" => Ok(Regime::Deep(DEFAULT_DEEP_DEPTH)),
            Some(("deep", d)) => {
                let d: usize = d.parse().map_err(|_| bad())?;
                if d < 2 {
                    return Err(invalid("regime", "deep depth must be >= 2"));
                }
                Ok(Regime::Deep(d))
            }
            Some(("longtail", r)) => {
                let r: f64 = r.parse().map_err(|_| bad())?;
                if !(r >= 0.0 && r.is_finite()) {
                    return Err(invalid("regime", "long-tail exponent must be >= 0"));
                }
                Ok(Regime::LongTail(r))
            }
            _ => Err(bad()),
        }
    }
}

/// `max(2, floor(num_org · (index+1)^(−r)))` for 0-based `index`.
pub fn long_tail_counts(num_org: usize, num_ids: usize, r: f64) -> Vec<usize> {
    (0..num_ids)
        .map(|index| {
            let raw = (num_org as f64 * ((index + 1) as f64).powf(-r)).floor() as usize;
            raw.max(2)
        })
        .collect()
}

/// Samples grouped by identity, ids `0..num_ids` in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledDataset {
    input_dim: usize,
    regime: Regime,
    ids: Vec<u32>,
    samples: Matrix,
    /// `offsets[id]..offsets[id + 1]` are the rows of identity `id`.
    offsets: Vec<usize>,
}

impl SampledDataset {
    pub fn from_parts(input_dim: usize, regime: Regime, ids: Vec<u32>, samples: Matrix) -> Result<Self> {
        if samples.rows() != ids.len() || (samples.rows() > 0 && samples.cols() != input_dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows of dim {input_dim}", ids.len()),
                found: format!("{}x{}", samples.rows(), samples.cols()),
            });
        }
        if ids.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("dataset", "samples must be sorted by id"));
        }
        let num_ids = ids.last().map_or(0, |&m| m as usize + 1);
        let mut offsets = vec![0usize; num_ids + 1];
        for &id in &ids {
            offsets[id as usize + 1] += 1;
        }
        for k in 0..num_ids {
            if offsets[k + 1] < 2 {
                return Err(invalid(
                    "dataset",
                    format!("identity {k} has {} samples, need at least 2", offsets[k + 1]),
                ));
            }
            offsets[k + 1] += offsets[k];
        }
        Ok(SampledDataset { input_dim, regime, ids, samples, offsets })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_ids(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn count(&self, id: u32) -> usize {
        let k = id as usize;
        self.offsets[k + 1] - self.offsets[k]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn samples_of(&self, id: u32) -> Result<Vec<&[f64]>> {
        let k = id as usize;
        if k >= self.num_ids() {
            return Err(Error::UnknownId(id));
        }
        Ok((self.offsets[k]..self.offsets[k + 1]).map(|r| self.samples.row(r)).collect())
    }

    /// Two distinct samples of `id`, uniformly without replacement:
    /// `(gallery, probe)`.
    pub fn draw_pair(&self, id: u32, rng: &mut LabRng) -> Result<(&[f64], &[f64])> {
        let k = id as usize;
        if k >= self.num_ids() {
            return Err(Error::UnknownId(id));
        }
        let n = self.count(id);
        let picks = rand::seq::index::sample(rng, n, 2);
        let base = self.offsets[k];
        Ok((self.samples.row(base + picks.index(0)), self.samples.row(base + picks.index(1))))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("{DATA_MAGIC} v1 {} {} {}\n", self.num_ids(), self.input_dim, self.regime);
        for (id, row) in self.ids.iter().zip(self.samples.iter_rows()) {
            let _ = write!(out, "{id}");
            for v in row {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, 1, "empty dataset file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != DATA_MAGIC || fields[1] != "v1" {
            return Err(parse_err(1, 1, "expected header `masstlab-data v1 <num_ids> <input_dim> <regime>`"));
        }
        let col_of = |field: &str| header.find(field).unwrap_or(0) + 1;
        let num_ids: usize = fields[2].parse().map_err(|_| parse_err(1, col_of(fields[2]), "num_ids"))?;
        let input_dim: usize = fields[3].parse().map_err(|_| parse_err(1, col_of(fields[3]), "input_dim"))?;
        let regime: Regime = fields[4].parse().map_err(|e: Error| parse_err(1, col_of(fields[4]), &e.to_string()))?;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut last_line = 1;
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            last_line = lineno;
            if line.trim().is_empty() {
                continue;
            }
            let mut column = 1;
            let mut parts = line.split(',');
            let id_str = parts.next().unwrap_or("");
            let id: u32 = id_str.trim().parse().map_err(|_| parse_err(lineno, column, "identity tag"))?;
            if id as usize >= num_ids {
                return Err(parse_err(lineno, column, &format!("identity {id} >= declared {num_ids}")));
            }
            if ids.last().is_some_and(|&prev| id < prev) {
                return Err(parse_err(lineno, column, "identities must be sorted"));
            }
            column += id_str.len() + 1;
            let mut n = 0;
            for part in parts {
                let v: f64 = part.trim().parse().map_err(|_| parse_err(lineno, column, "not a float"))?;
                if !v.is_finite() {
                    return Err(parse_err(lineno, column, "non-finite value"));
                }
                data.push(v);
                n += 1;
                column += part.len() + 1;
            }
            if n != input_dim {
                return Err(parse_err(lineno, column, &format!("expected {input_dim} values, found {n}")));
            }
            ids.push(id);
        }
        let samples = Matrix::new(ids.len(), input_dim, data)?;
        let declared_ok = ids.last().is_some_and(|&m| m as usize + 1 == num_ids);
        if !declared_ok {
            return Err(parse_err(last_line, 1, &format!("file ends before identity {} appears", num_ids - 1)));
        }
        SampledDataset::from_parts(input_dim, regime, ids, samples).map_err(|e| parse_err(last_line, 1, &e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_str(&std::fs::read_to_string(path)?)
    }
}

fn parse_err(line: usize, column: usize, message: &str) -> Error {
    Error::Parse { line, column, message: message.to_string() }
}

pub fn sample_dataset(universe: &IdentityUniverse, regime: Regime) -> SampledDataset {
    let counts = regime.counts(universe.num_ids);
    let total: usize = counts.iter().sum();
    let mut ids = Vec::with_capacity(total);
    let mut data = Vec::with_capacity(total * universe.input_dim);
    let key_seed = universe.seed ^ regime.tag().rotate_left(17);
    for (id, &count) in counts.iter().enumerate() {
        let mut rng = rngs::keyed(key_seed, id as u64);
        for _ in 0..count {
            data.extend(universe.draw_sample(id, &mut rng));
            ids.push(id as u32);
        }
    }
    let samples = Matrix::new(total, universe.input_dim, data).expect("row count matches");
    SampledDataset::from_parts(universe.input_dim, regime, ids, samples).expect("every count is >= 2")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn universe_is_deterministic_and_respects_cap() {
        let a = generate_universe(50, 32, 3).unwrap();
        let b = generate_universe(50, 32, 3).unwrap();
        assert_eq!(a.centers(), b.centers());
        let two = generate_universe(2, 32, 1).unwrap();
        assert!(diffcore::dot(&two.centers()[0], &two.centers()[1]).abs() <= 0.95);
        for (i, c) in a.centers().iter().enumerate() {
            assert!((diffcore::norm(c) - 1.0).abs() < 1e-12);
            for d in &a.centers()[i + 1..] {
                assert!(diffcore::dot(c, d).abs() <= MAX_CENTER_COS);
            }
        }
    }

    #[test]
    fn tiny_dimension_runs_out_of_room() {
        assert!(matches!(generate_universe(10_000, 2, 0), Err(Error::CenterCapacity { .. })));
        assert!(generate_universe(1, 8, 0).is_err());
        assert!(generate_universe(4, 1, 0).is_err());
    }

    #[test]
    fn long_tail_examples() {
        assert_eq!(long_tail_counts(44, 20, 0.0), vec![44; 20]);
        assert_eq!(long_tail_counts(100, 4, 0.5)[3], 50);
        assert_eq!(*long_tail_counts(10, 1_000_001, 0.3).last().unwrap(), 2);
        assert_eq!(Regime::LongTail(0.0).counts(30), Regime::Deep(DEFAULT_DEEP_DEPTH).counts(30));
    }

    #[test]
    fn totals_shrink_with_exponent() {
        let mut prev = usize::MAX;
        for k in 0..=6 {
            let r = 0.05 * k as f64;
            let total: usize = long_tail_counts(44, 500, r).iter().sum();
            assert!(total <= prev);
            prev = total;
        }
    }

    #[test]
    fn dataset_sizes() {
        let u = generate_universe(500, 16, 1).unwrap();
        assert_eq!(sample_dataset(&u, Regime::Shallow).len(), 1000);
        let u100 = generate_universe(100, 16, 1).unwrap();
        assert_eq!(sample_dataset(&u100, Regime::Deep(44)).len(), 4400);
        let lt = sample_dataset(&u100, Regime::LongTail(0.25));
        assert_eq!(lt.len(), long_tail_counts(44, 100, 0.25).iter().sum::<usize>());
        assert_eq!(lt.counts(), long_tail_counts(44, 100, 0.25));
        for row in lt.samples().iter_rows() {
            assert!((diffcore::norm(row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_universe_and_regime_give_same_samples() {
        let u = generate_universe(20, 8, 4).unwrap();
        assert_eq!(sample_dataset(&u, Regime::Shallow), sample_dataset(&u, Regime::Shallow));
    }

    #[test]
    fn identities_are_separable_on_average() {
        let u = generate_universe(40, 32, 5).unwrap();
        let ds = sample_dataset(&u, Regime::Deep(6));
        let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                let c = diffcore::dot(ds.samples().row(i), ds.samples().row(j));
                if ds.ids()[i] == ds.ids()[j] {
                    intra += c;
                    n_intra += 1;
                } else {
                    inter += c;
                    n_inter += 1;
                }
            }
        }
        assert!(intra / n_intra as f64 > inter / n_inter as f64);
    }

    #[test]
    fn draw_pair_examples() {
        let u = generate_universe(10, 8, 2).unwrap();
        let ds = sample_dataset(&u, Regime::Shallow);
        let mut rng = rngs::stream(1, Stream::Batch);
        let both = ds.samples_of(3).unwrap();
        for _ in 0..20 {
            let (g, p) = ds.draw_pair(3, &mut rng).unwrap();
            assert_ne!(g, p);
            assert!((g == both[0] && p == both[1]) || (g == both[1] && p == both[0]));
        }
        let deep = sample_dataset(&u, Regime::Deep(5));
        let mut r1 = LabRng::seed_from_u64(9);
        let mut r2 = LabRng::seed_from_u64(9);
        assert_eq!(deep.draw_pair(4, &mut r1).unwrap(), deep.draw_pair(4, &mut r2).unwrap());
        assert!(matches!(ds.draw_pair(10, &mut rng), Err(Error::UnknownId(10))));
    }

    #[test]
    fn file_round_trip_and_diagnostics() {
        let u = generate_universe(6, 5, 2).unwrap();
        let ds = sample_dataset(&u, Regime::LongTail(0.25));
        let text = ds.to_file_string();
        assert!(text.starts_with("masstlab-data v1 6 5 longtail:0.25\n"));
        let back = SampledDataset::from_file_str(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.regime(), Regime::LongTail(0.25));

        let cut = &text[..text.len() - 30];
        match SampledDataset::from_file_str(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, text.lines().count()),
            other => panic!("expected parse error, got {other:?}"),
        }
        let lines: Vec<&str> = text.lines().collect();
        // Keep a single sample of the last identity.
        let first_of_last = lines.iter().position(|l| l.starts_with("5,")).unwrap();
        let dropped = lines[..=first_of_last].join("\n");
        assert!(matches!(SampledDataset::from_file_str(&dropped), Err(Error::Parse { .. })));
        let garbled = text.replacen(",", ",x", 1);
        assert!(matches!(SampledDataset::from_file_str(&garbled), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn regime_parsing() {
        assert_eq!("shallow".parse::<Regime>().unwrap(), Regime::Shallow);
        assert_eq!("deep:44".parse::<Regime>().unwrap(), Regime::Deep(44));
        assert_eq!("longtail:0.25".parse::<Regime>().unwrap(), Regime::LongTail(0.25));
        assert!("longtail:-1".parse::<Regime>().is_err());
        assert!("wide".parse::<Regime>().is_err());
    }

    proptest! {
        #[test]
        fn long_tail_counts_are_monotone(num_org in 2usize..200, r in 0.0f64..2.0) {
            let counts = long_tail_counts(num_org, 300, r);
            prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(counts.iter().all(|&c| c >= 2));
        }

        #[test]
        fn smaller_exponent_never_has_fewer_samples(r1 in 0.0f64..1.0, dr in 0.0f64..1.0) {
            let t1: usize = long_tail_counts(44, 200, r1).iter().sum();
            let t2: usize = long_tail_counts(44, 200, r1 + dr).iter().sum();
            prop_assert!(t1 >= t2);
        }
    }
}
