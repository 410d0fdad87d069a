//! Binary feature files, model checkpoints, results and classifier exports.
//!
//! All binary integers and floats are little-endian.
//!
//! Feature file (`FSFG1`):
//!
//! ```text
//! magic "FSFG1" | version u32 | n_a u32 | n_b u32 | count u32
//! count × ( label u32 | n_a·n_b × f32, sub-vector order )
//! ```
//!
//! Feature-map file (`FSFMAP1`), the input to pooling:
//!
//! ```text
//! magic "FSFMAP1" | n_a u32 | n_b u32 | locations u32 | count u32
//! count × ( label u32 | n_a·L × f32 (stream A, row-major) | n_b·L × f32 )
//! ```
//!
//! Checkpoint (`FSFGM1`):
//!
//! ```text
//! magic "FSFGM1" | kind u32 (0 piecewise, 1 global) | n_a u32 | n_b u32
//! | layers u32 | hidden u32 | parameters × f32
//! ```
//!
//! Parameters are in declaration order: bank by bank, layer by layer, the
//! row-major weight followed by the bias.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bilinear::{pool, BilinearFeature, FeatureMap, PostTransform};
use crate::dataset::{Dataset, Role};
use crate::episodes::TrialResult;
use crate::error::{Error, Result};
use crate::mapping::{ClassifierBank, MappingKind, MappingModel, ModelConfig};
use crate::stats::TTestReport;

pub const FEATURE_MAGIC: &[u8; 5] = b"FSFG1";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_MAP_MAGIC: &[u8; 7] = b"FSFMAP1";
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"FSFGM1";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let got = self.take(expected.len(), "magic")?;
        if got != expected {
            return Err(Error::parse(0, format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                self.bytes.len(),
                format!(
                    "truncated {what}: expected {} bytes from offset {}, file has {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::parse(self.pos, "size overflow"))?, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    /// Errors unless exactly `expected` bytes remain.
    fn expect_remaining(&self, expected: u128, what: &str) -> Result<()> {
        let remaining = (self.bytes.len() - self.pos) as u128;
        if remaining != expected {
            return Err(Error::parse(
                self.pos,
                format!(
                    "{what}: header declares {} payload bytes (total {}), file has {} (total {})",
                    expected,
                    expected + self.pos as u128,
                    remaining,
                    self.bytes.len()
                ),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_features(data: &Dataset) -> Result<Vec<u8>> {
    let d = data.n_a() * data.n_b();
    let mut out = Vec::with_capacity(21 + data.len() * (4 + 4 * d));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    put_u32(&mut out, data.n_a())?;
    put_u32(&mut out, data.n_b())?;
    put_u32(&mut out, data.len())?;
    for (f, &label) in data.features().iter().zip(data.labels()) {
        out.extend_from_slice(&label.to_le_bytes());
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], role: Role) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::parse(5, format!("unsupported version {version}")));
    }
    let n_a = r.u32("n_a")? as usize;
    let n_b = r.u32("n_b")? as usize;
    let count = r.u32("item count")? as usize;
    let d = n_a * n_b;
    r.expect_remaining(count as u128 * (4 + 4 * d as u128), "feature payload")?;
    let mut features = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(r.u32("label")?);
        let at = r.pos;
        let values = r.f32s(d, "feature values")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(at, "non-finite feature value"));
        }
        features.push(BilinearFeature::new(n_a, n_b, values)?);
    }
    Dataset::new(role, n_a, n_b, features, labels)
}

pub fn save_features(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    fs::write(path, encode_features(data)?)?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>, role: Role) -> Result<Dataset> {
    decode_features(&fs::read(path)?, role)
}

/// `label → dense index` for datasets whose labels are not `0..C`.
pub fn label_remap(data: &Dataset) -> Option<Vec<(u32, usize)>> {
    if data.labels_contiguous() {
        return None;
    }
    Some(data.categories().into_iter().enumerate().map(|(i, l)| (l, i)).collect())
}

/// One image's pair of stream outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapPair {
    pub label: u32,
    pub stream_a: FeatureMap,
    pub stream_b: FeatureMap,
}

pub fn encode_feature_maps(items: &[FeatureMapPair]) -> Result<Vec<u8>> {
    let first = items.first().ok_or(Error::Empty("feature maps"))?;
    let (n_a, n_b, l) = (first.stream_a.channels(), first.stream_b.channels(), first.stream_a.locations());
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAP_MAGIC);
    put_u32(&mut out, n_a)?;
    put_u32(&mut out, n_b)?;
    put_u32(&mut out, l)?;
    put_u32(&mut out, items.len())?;
    for item in items {
        let (a, b) = (item.stream_a.values(), item.stream_b.values());
        if a.shape() != (n_a, l) || b.shape() != (n_b, l) {
            return Err(Error::shape("encode_feature_maps", a.shape(), b.shape()));
        }
        out.extend_from_slice(&item.label.to_le_bytes());
        for v in a.data().iter().chain(b.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_feature_maps(bytes: &[u8]) -> Result<Vec<FeatureMapPair>> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAP_MAGIC)?;
    let n_a = r.u32("n_a")? as usize;
    let n_b = r.u32("n_b")? as usize;
    let l = r.u32("locations")? as usize;
    let count = r.u32("item count")? as usize;
    r.expect_remaining(count as u128 * (4 + 4 * ((n_a + n_b) * l) as u128), "feature-map payload")?;
    (0..count)
        .map(|_| {
            let label = r.u32("label")?;
            let a = r.f32s(n_a * l, "stream A")?;
            let b = r.f32s(n_b * l, "stream B")?;
            Ok(FeatureMapPair {
                label,
                stream_a: FeatureMap::from_vec(n_a, l, a)?,
                stream_b: FeatureMap::from_vec(n_b, l, b)?,
            })
        })
        .collect()
}

/// Pools every pair and applies `transform`.
pub fn pool_pairs(items: &[FeatureMapPair], transform: PostTransform, role: Role) -> Result<Dataset> {
    let first = items.first().ok_or(Error::Empty("feature maps"))?;
    let (n_a, n_b) = (first.stream_a.channels(), first.stream_b.channels());
    let features = items
        .iter()
        .map(|p| pool(&p.stream_a, &p.stream_b)?.apply(transform))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(role, n_a, n_b, features, items.iter().map(|p| p.label).collect())
}

pub fn encode_model(model: &MappingModel) -> Result<Vec<u8>> {
    let c = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&c.kind.tag().to_le_bytes());
    put_u32(&mut out, c.n_a)?;
    put_u32(&mut out, c.n_b)?;
    put_u32(&mut out, c.layers)?;
    put_u32(&mut out, c.hidden)?;
    for v in model.parameters() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<MappingModel> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let tag = r.u32("kind")?;
    let kind = MappingKind::from_tag(tag).ok_or_else(|| Error::parse(6, format!("unknown kind tag {tag}")))?;
    let config = ModelConfig {
        kind,
        n_a: r.u32("n_a")? as usize,
        n_b: r.u32("n_b")? as usize,
        layers: r.u32("layers")? as usize,
        hidden: r.u32("hidden")? as usize,
    };
    config.validate().map_err(|e| Error::parse(10, e.to_string()))?;
    let count = config.parameter_count();
    r.expect_remaining(count * 4, "checkpoint parameters")?;
    let values = r.f32s(count as usize, "parameters")?;
    let mut model = MappingModel::zeros(config)?;
    for (p, v) in model.parameters_mut().zip(values) {
        *p = v;
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &MappingModel) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MappingModel> {
    decode_model(&fs::read(path)?)
}

/// Ordered `key=value` pairs describing a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig(pub Vec<(String, String)>);

impl RunConfig {
    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    /// Tab-separated `key=value` fields.
    pub fn line(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("\t")
    }
}

/// Results file: config header, one line per trial, mean/std, and an
/// optional t-test block.
pub fn format_results(config: &RunConfig, result: &TrialResult, ttest: Option<(&str, &TTestReport)>) -> String {
    let mut out = String::new();
    writeln!(out, "#config\t{}", config.line()).unwrap();
    writeln!(out, "trial\taccuracy").unwrap();
    for (i, a) in result.accuracies.iter().enumerate() {
        writeln!(out, "{i}\t{a:.6}").unwrap();
    }
    writeln!(out, "mean\t{:.6}", result.mean).unwrap();
    writeln!(out, "std\t{:.6}", result.std).unwrap();
    if let Some((against, t)) = ttest {
        format_ttest(&mut out, against, t);
    }
    out
}

fn format_ttest(out: &mut String, against: &str, t: &TTestReport) {
    writeln!(out, "#ttest\tagainst={against}").unwrap();
    writeln!(out, "t\t{:.6}", t.t_statistic).unwrap();
    writeln!(out, "df\t{}", t.degrees_of_freedom).unwrap();
    writeln!(out, "p\t{:.6e}", t.p_value).unwrap();
    writeln!(out, "significant_0.05\t{}", t.significant).unwrap();
}

/// Depth → mean/std table followed by the per-trial accuracies.
pub fn format_depth_table(config: &RunConfig, rows: &[(usize, TrialResult)]) -> String {
    let mut out = String::new();
    writeln!(out, "#config\t{}", config.line()).unwrap();
    writeln!(out, "layers\tmean\tstd\ttrials").unwrap();
    for (depth, r) in rows {
        writeln!(out, "{depth}\t{:.6}\t{:.6}\t{}", r.mean, r.std, r.trials()).unwrap();
    }
    writeln!(out, "#per-trial").unwrap();
    for (depth, r) in rows {
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
        writeln!(out, "{depth}\t{}", accs.join("\t")).unwrap();
    }
    out
}

pub fn format_comparison(config: &RunConfig, cmp: &crate::episodes::MappingComparison) -> String {
    let mut out = String::new();
    writeln!(out, "#config\t{}", config.line()).unwrap();
    writeln!(out, "mapping\tparameters\thidden\tmean\tstd").unwrap();
    writeln!(
        out,
        "piecewise\t{}\t-\t{:.6}\t{:.6}",
        cmp.piecewise_parameters, cmp.piecewise.mean, cmp.piecewise.std
    )
    .unwrap();
    writeln!(
        out,
        "global\t{}\t{}\t{:.6}\t{:.6}",
        cmp.global_parameters, cmp.global_hidden, cmp.global.mean, cmp.global.std
    )
    .unwrap();
    writeln!(out, "trial\tpiecewise\tglobal").unwrap();
    for (i, (p, g)) in cmp.piecewise.accuracies.iter().zip(&cmp.global.accuracies).enumerate() {
        writeln!(out, "{i}\t{p:.6}\t{g:.6}").unwrap();
    }
    format_ttest(&mut out, "global", &cmp.ttest);
    out
}

/// One exported classifier row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierRow {
    pub category: u32,
    pub repetition: usize,
    pub values: Vec<f64>,
}

/// Flattens per-repetition banks into rows (repetition-major).
pub fn classifier_rows(banks: &[ClassifierBank]) -> Vec<ClassifierRow> {
    banks
        .iter()
        .enumerate()
        .flat_map(|(rep, bank)| {
            bank.categories
                .iter()
                .zip(&bank.classifiers)
                .map(move |(&category, f)| ClassifierRow {
                    category,
                    repetition: rep,
                    values: f.clone(),
                })
        })
        .collect()
}

/// `label<TAB>repetition<TAB>v₁<TAB>…<TAB>v_D` per row. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn format_classifiers(banks: &[ClassifierBank]) -> Result<String> {
    if banks.iter().all(|b| b.is_empty()) {
        return Err(Error::Empty("classifier bank"));
    }
    let mut out = String::new();
    for row in classifier_rows(banks) {
        write!(out, "{}\t{}", row.category, row.repetition).unwrap();
        for v in &row.values {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_classifiers(path: impl AsRef<Path>, banks: &[ClassifierBank]) -> Result<()> {
    fs::write(path, format_classifiers(banks)?)?;
    Ok(())
}

pub fn parse_classifier_row(line: &str) -> Result<ClassifierRow> {
    let bad = |m: &str| Error::parse(0, format!("classifier row: {m}"));
    let mut fields = line.trim_end_matches('\n').split('\t');
    let category = fields.next().ok_or_else(|| bad("missing label"))?.parse().map_err(|_| bad("label"))?;
    let repetition = fields
        .next()
        .ok_or_else(|| bad("missing repetition"))?
        .parse()
        .map_err(|_| bad("repetition"))?;
    let values = fields
        .map(|f| f.parse::<f64>().map_err(|_| bad("value")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassifierRow {
        category,
        repetition,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_dataset(seed: u64, n_a: usize, n_b: usize, count: usize) -> Dataset {
        let mut rng = Rng::new(seed, 0);
        let feats = (0..count)
            .map(|_| BilinearFeature::new(n_a, n_b, (0..n_a * n_b).map(|_| rng.uniform(-5.0, 5.0) as f32).collect()).unwrap())
            .collect();
        let labels = (0..count).map(|i| (i % 3) as u32 * 7).collect();
        Dataset::new(Role::Novel, n_a, n_b, feats, labels).unwrap()
    }

    proptest! {
        #[test]
        fn feature_round_trip(seed in any::<u64>(), n_a in 1usize..5, n_b in 1usize..5, count in 0usize..8) {
            let d = random_dataset(seed, n_a, n_b, count);
            let bytes = encode_features(&d).unwrap();
            let back = decode_features(&bytes, Role::Novel).unwrap();
            prop_assert_eq!(&back, &d);
            prop_assert_eq!(encode_features(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn truncated_payload_reports_lengths() {
        let d = random_dataset(1, 2, 2, 3);
        let bytes = encode_features(&d).unwrap();
        let err = decode_features(&bytes[..bytes.len() - 3], Role::Novel).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(msg.contains(&format!("total {}", bytes.len())), "{msg}");
        assert!(msg.contains(&format!("total {})", bytes.len() - 3)), "{msg}");

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_features(&extra, Role::Novel).is_err());
        assert!(decode_features(&bytes[..10], Role::Novel).is_err());
    }

    #[test]
    fn bad_magic_and_version() {
        let d = random_dataset(2, 1, 1, 1);
        let mut bytes = encode_features(&d).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes, Role::Novel), Err(Error::Parse { offset: 0, .. })));
        let mut bytes = encode_features(&d).unwrap();
        bytes[5] = 9;
        assert!(matches!(decode_features(&bytes, Role::Novel), Err(Error::Parse { offset: 5, .. })));
    }

    #[test]
    fn single_item_sub_vector() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FSFG1");
        for v in [1u32, 2, 2, 1, 0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [3.0f32, 6.0, 4.0, 8.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let d = decode_features(&bytes, Role::Novel).unwrap();
        assert_eq!(d.feature(0).sub_vector(0), &[3.0, 6.0]);
        assert_eq!(d.feature(0).sub_vector(1), &[4.0, 8.0]);
        assert_eq!(label_remap(&d), None);
    }

    #[test]
    fn remap_reported_for_sparse_labels() {
        let d = random_dataset(3, 1, 1, 3);
        assert_eq!(label_remap(&d), Some(vec![(0, 0), (7, 1), (14, 2)]));
    }

    #[test]
    fn feature_maps_pool_through_file() {
        let pair = FeatureMapPair {
            label: 4,
            stream_a: FeatureMap::from_vec(2, 1, vec![1.0, 2.0]).unwrap(),
            stream_b: FeatureMap::from_vec(2, 1, vec![3.0, 4.0]).unwrap(),
        };
        let bytes = encode_feature_maps(std::slice::from_ref(&pair)).unwrap();
        let back = decode_feature_maps(&bytes).unwrap();
        assert_eq!(back, vec![pair]);
        let d = pool_pairs(&back, PostTransform::None, Role::Auxiliary).unwrap();
        assert_eq!(d.feature(0).data(), &[3.0, 6.0, 4.0, 8.0]);
        assert!(decode_feature_maps(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for kind in [MappingKind::Piecewise, MappingKind::Global] {
            let cfg = ModelConfig {
                kind,
                n_a: 3,
                n_b: 2,
                layers: 3,
                hidden: 4,
            };
            let m = MappingModel::init(cfg, &mut Rng::new(1, 1)).unwrap();
            let bytes = encode_model(&m).unwrap();
            assert_eq!(&bytes[..6], b"FSFGM1");
            assert_eq!(bytes.len(), 6 + 20 + 4 * cfg.parameter_count() as usize);
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, m);
            assert!(decode_model(&bytes[..bytes.len() - 4]).is_err());
        }
    }

    #[test]
    fn results_layout() {
        let mut cfg = RunConfig::default();
        cfg.push("seed", 1).push("n_e", 5);
        let r = TrialResult::from_accuracies(vec![0.5, 1.0]);
        let t = crate::stats::paired_ttest_samples(&[0.5, 1.0], &[0.25, 0.5]).unwrap();
        let text = format_results(&cfg, &r, Some(("knn", &t)));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "#config\tseed=1\tn_e=5");
        assert_eq!(lines[1], "trial\taccuracy");
        assert_eq!(lines[2], "0\t0.500000");
        assert_eq!(lines[4], "mean\t0.750000");
        assert_eq!(lines[6], "#ttest\tagainst=knn");
        assert_eq!(lines[8], "df\t1");
    }

    #[test]
    fn classifier_rows_round_trip() {
        let banks = vec![
            ClassifierBank {
                categories: vec![3, 5],
                classifiers: vec![vec![0.1, -2.5e-8], vec![1.0 / 3.0, 7.0]],
            };
            3
        ];
        let text = format_classifiers(&banks).unwrap();
        assert_eq!(text.lines().count(), 6);
        let rows: Vec<ClassifierRow> = text.lines().map(|l| parse_classifier_row(l).unwrap()).collect();
        assert_eq!(rows, classifier_rows(&banks));
        assert!(format_classifiers(&[]).is_err());
    }
}
