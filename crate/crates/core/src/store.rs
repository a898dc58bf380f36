//! Reference database: one record per product holding its global descriptor,
//! local features, and category label; searched by exhaustive exact
//! nearest-neighbor scan under cosine distance.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::Deserialize;

use crate::binfmt::{Reader, Writer};
use crate::embedder::{Descriptor, EmbedderNet, LocalFeature};
use crate::error::{Error, Result};
use crate::img::load_png;

const DB_MAGIC: &[u8; 4] = b"RDB1";

/// Cosine distance `1 - x . y` between unit-norm descriptors, computed in
/// f64 and clamped to its theoretical range [0, 2].
pub fn cosine_distance(x: &Descriptor, y: &Descriptor) -> Result<f64> {
    cosine_distance_units(x.values(), y.values())
}

/// Same distance on raw unit-norm float vectors (e.g. local-feature
/// descriptors, which are normalized at construction).
pub(crate) fn cosine_distance_units(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "descriptor lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let dot: f64 = x.iter().zip(y).map(|(&a, &b)| a as f64 * b as f64).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

/// Everything stored about one catalog product.
#[derive(Clone, Debug)]
pub struct ProductRecord {
    pub product_id: String,
    pub category_id: String,
    pub descriptor: Descriptor,
    pub locals: Vec<LocalFeature>,
    /// Provenance only; not persisted in the binary format.
    pub source_image_path: String,
}

/// One search result: a product and its distance to the query, 1-based rank.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RankedMatch {
    pub product_id: String,
    pub distance: f64,
    pub rank: usize,
}

/// Immutable-after-build product database.
#[derive(Debug, Default)]
pub struct ReferenceDb {
    records: Vec<ProductRecord>,
    index: BTreeMap<String, usize>,
}

impl ReferenceDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: ProductRecord) -> Result<()> {
        if let Some(dim) = self.dim() {
            if record.descriptor.len() != dim {
                return Err(Error::Dimension(format!(
                    "record '{}' has descriptor length {}, database holds {dim}",
                    record.product_id,
                    record.descriptor.len()
                )));
            }
        }
        if self.index.contains_key(&record.product_id) {
            return Err(Error::DuplicateProduct(record.product_id.clone()));
        }
        self.index.insert(record.product_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ProductRecord] {
        &self.records
    }

    pub fn get(&self, product_id: &str) -> Option<&ProductRecord> {
        self.index.get(product_id).map(|&i| &self.records[i])
    }

    /// Descriptor dimensionality, present once any record is.
    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.descriptor.len())
    }

    /// Exhaustive exact k-nearest-neighbor search by ascending cosine
    /// distance, ties broken by lexicographic product id. `category_filter`
    /// restricts the eligible records. Returns min(k, eligible) matches.
    pub fn knn(
        &self,
        query: &Descriptor,
        k: usize,
        category_filter: Option<&str>,
    ) -> Result<Vec<RankedMatch>> {
        if k == 0 {
            return Err(Error::Validation("k must be >= 1".into()));
        }
        if self.records.is_empty() {
            return Err(Error::NoCandidates("the database is empty".into()));
        }
        let mut scored = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            if let Some(cat) = category_filter {
                if rec.category_id != cat {
                    continue;
                }
            }
            scored.push((cosine_distance(query, &rec.descriptor)?, rec.product_id.as_str()));
        }
        if scored.is_empty() {
            return Err(Error::NoCandidates(format!(
                "no records in category '{}'",
                category_filter.unwrap_or("")
            )));
        }
        scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (distance, id))| RankedMatch {
                product_id: id.to_string(),
                distance,
                rank: i + 1,
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer::new(BufWriter::new(file));
        w.magic(DB_MAGIC)?;
        w.u32(self.records.len() as u32)?;
        for rec in &self.records {
            w.string(&rec.product_id)?;
            w.string(&rec.category_id)?;
            w.u32(rec.descriptor.len() as u32)?;
            w.f32_slice(rec.descriptor.values())?;
            w.u32(rec.locals.len() as u32)?;
            for l in &rec.locals {
                w.f32(l.x)?;
                w.f32(l.y)?;
                w.f32(l.v[0])?;
                w.f32(l.v[1])?;
                w.f32_slice(&l.f)?;
            }
        }
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(BufReader::new(file));
        r.expect_magic(DB_MAGIC)?;
        let count = r.u32("record count")?;
        let mut db = ReferenceDb::new();
        for i in 0..count {
            let product_id = r.string("product id")?;
            let category_id = r.string("category id")?;
            let dim_offset = r.offset();
            let dim = r.u32("descriptor length")? as usize;
            if let Some(expect) = db.dim() {
                if dim != expect {
                    return Err(Error::Format {
                        offset: dim_offset,
                        msg: format!(
                            "record {i} has descriptor length {dim}, earlier records have {expect}"
                        ),
                    });
                }
            }
            let values = r.f32_vec(dim, "descriptor values")?;
            let descriptor = Descriptor::new(values).map_err(|e| Error::Format {
                offset: dim_offset,
                msg: format!("record {i} ('{product_id}') holds an invalid descriptor: {e}"),
            })?;
            let n_locals = r.u32("local feature count")? as usize;
            let mut locals = Vec::with_capacity(n_locals);
            for _ in 0..n_locals {
                let x = r.f32("local x")?;
                let y = r.f32("local y")?;
                let v = [r.f32("local v")?, r.f32("local v")?];
                let f = r.f32_vec(dim, "local feature values")?;
                locals.push(LocalFeature { x, y, v, f });
            }
            db.insert(ProductRecord {
                product_id,
                category_id,
                descriptor,
                locals,
                source_image_path: String::new(),
            })?;
        }
        Ok(db)
    }
}

/// One row of the build manifest.
#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub product_id: String,
    pub category_id: String,
    pub image_path: String,
}

/// Reads a `product_id,category_id,image_path` CSV (with that header row).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let mut entries = Vec::new();
    for row in reader.deserialize() {
        let entry: ManifestEntry = row.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0);
            Error::Parse { line, msg: e.to_string() }
        })?;
        let line = entries.len() + 2; // header occupies line 1
        if entry.product_id.is_empty() || entry.image_path.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "product_id and image_path must be non-empty".into(),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Embeds every manifest image and assembles the database. `local_kernel`
/// and `local_stride` control the local-feature pooling window.
pub fn build(
    entries: &[ManifestEntry],
    net: &EmbedderNet,
    local_kernel: usize,
    local_stride: usize,
) -> Result<ReferenceDb> {
    let mut db = ReferenceDb::new();
    for entry in entries {
        let image = load_png(&entry.image_path)?;
        let (descriptor, locals) = net.describe(&image, local_kernel, local_stride)?;
        db.insert(ProductRecord {
            product_id: entry.product_id.clone(),
            category_id: entry.category_id.clone(),
            descriptor,
            locals,
            source_image_path: entry.image_path.clone(),
        })?;
    }
    Ok(db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::l2_normalize;

    fn axis(dim: usize, i: usize) -> Descriptor {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Descriptor::new(v).unwrap()
    }

    fn random_descriptor(dim: usize, rng: &mut ChaCha8Rng) -> Descriptor {
        loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(n) = l2_normalize(&v) {
                return Descriptor::new(n).unwrap();
            }
        }
    }

    fn record(id: &str, category: &str, descriptor: Descriptor) -> ProductRecord {
        ProductRecord {
            product_id: id.to_string(),
            category_id: category.to_string(),
            descriptor,
            locals: Vec::new(),
            source_image_path: String::new(),
        }
    }

    #[test]
    fn cosine_distance_trivials() {
        let x = axis(4, 0);
        let y = axis(4, 1);
        let neg = Descriptor::new(vec![-1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(cosine_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(cosine_distance(&x, &y).unwrap(), 1.0);
        assert_eq!(cosine_distance(&x, &neg).unwrap(), 2.0);
    }

    #[test]
    fn cosine_distance_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = random_descriptor(16, &mut rng);
            let y = random_descriptor(16, &mut rng);
            let d1 = cosine_distance(&x, &y).unwrap();
            let d2 = cosine_distance(&y, &x).unwrap();
            assert!((d1 - d2).abs() < 1e-7);
            assert!((0.0..=2.0).contains(&d1));
        }
    }

    #[test]
    fn cosine_distance_rejects_length_mismatch() {
        let x = axis(4, 0);
        let y = axis(5, 0);
        assert!(matches!(cosine_distance(&x, &y), Err(Error::Dimension(_))));
    }

    #[test]
    fn knn_exact_hit_ranks_first_with_zero_distance() {
        let mut db = ReferenceDb::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..10 {
            db.insert(record(&format!("p{i}"), "c", random_descriptor(8, &mut rng)))
                .unwrap();
        }
        let q = db.get("p4").unwrap().descriptor.clone();
        let hits = db.knn(&q, 3, None).unwrap();
        assert_eq!(hits[0].product_id, "p4");
        // Self-distance: the f32 unit vector's squared norm is 1 only to
        // within rounding, so compare against the descriptor tolerance.
        assert!(hits[0].distance < 1e-6, "distance {}", hits[0].distance);
        assert_eq!(hits[0].rank, 1);
    }

    #[test]
    fn knn_clamps_k_and_validates_inputs() {
        let mut db = ReferenceDb::new();
        db.insert(record("only", "c", axis(4, 0))).unwrap();
        assert_eq!(db.knn(&axis(4, 1), 10, None).unwrap().len(), 1);
        assert!(matches!(db.knn(&axis(4, 1), 0, None), Err(Error::Validation(_))));
        assert!(matches!(
            db.knn(&axis(4, 1), 1, Some("missing")),
            Err(Error::NoCandidates(_))
        ));
        let empty = ReferenceDb::new();
        assert!(matches!(empty.knn(&axis(4, 1), 1, None), Err(Error::NoCandidates(_))));
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut db = ReferenceDb::new();
        let mut descs = Vec::new();
        for i in 0..50 {
            let d = random_descriptor(12, &mut rng);
            descs.push((format!("p{i:02}"), d.clone()));
            db.insert(record(&format!("p{i:02}"), "c", d)).unwrap();
        }
        for _ in 0..20 {
            let q = random_descriptor(12, &mut rng);
            let mut oracle: Vec<(f64, String)> = descs
                .iter()
                .map(|(id, d)| (cosine_distance(&q, d).unwrap(), id.clone()))
                .collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            let hits = db.knn(&q, 7, None).unwrap();
            assert_eq!(hits.len(), 7);
            for (i, hit) in hits.iter().enumerate() {
                assert_eq!(hit.product_id, oracle[i].1);
                assert_eq!(hit.distance, oracle[i].0);
                assert_eq!(hit.rank, i + 1);
            }
            for pair in hits.windows(2) {
                assert!(pair[0].distance <= pair[1].distance);
            }
        }
    }

    #[test]
    fn knn_breaks_distance_ties_lexicographically() {
        let mut db = ReferenceDb::new();
        db.insert(record("zed", "c", axis(4, 0))).unwrap();
        db.insert(record("abc", "c", axis(4, 0))).unwrap();
        let hits = db.knn(&axis(4, 0), 2, None).unwrap();
        assert_eq!(hits[0].product_id, "abc");
        assert_eq!(hits[1].product_id, "zed");
    }

    #[test]
    fn knn_category_filter_restricts_candidates() {
        let mut db = ReferenceDb::new();
        db.insert(record("a", "dairy", axis(4, 0))).unwrap();
        db.insert(record("b", "cereal", axis(4, 1))).unwrap();
        db.insert(record("c", "cereal", axis(4, 2))).unwrap();
        let hits = db.knn(&axis(4, 0), 5, Some("cereal")).unwrap();
        assert_eq!(hits.len(), 2);
        assert!(hits.iter().all(|h| h.product_id != "a"));
    }

    #[test]
    fn duplicate_product_id_is_rejected() {
        let mut db = ReferenceDb::new();
        db.insert(record("dup", "c", axis(4, 0))).unwrap();
        assert!(matches!(
            db.insert(record("dup", "c", axis(4, 1))),
            Err(Error::DuplicateProduct(_))
        ));
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut db = ReferenceDb::new();
        for i in 0..5 {
            let mut rec = record(&format!("prod-{i}"), &format!("cat-{}", i % 2), random_descriptor(6, &mut rng));
            rec.locals = (0..3)
                .map(|j| LocalFeature {
                    x: j as f32 + 0.5,
                    y: 2.0 * j as f32,
                    v: [0.6, -0.8],
                    f: random_descriptor(6, &mut rng).values().to_vec(),
                })
                .collect();
            db.insert(rec).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.db");
        db.save(&path).unwrap();
        let loaded = ReferenceDb::load(&path).unwrap();
        assert_eq!(loaded.len(), db.len());
        for (a, b) in db.records().iter().zip(loaded.records()) {
            assert_eq!(a.product_id, b.product_id);
            assert_eq!(a.category_id, b.category_id);
            assert_eq!(a.descriptor.values(), b.descriptor.values());
            assert_eq!(a.locals, b.locals);
        }
    }

    #[test]
    fn load_rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.db");
        std::fs::write(&bad, b"XXXX\x00\x00\x00\x00").unwrap();
        assert!(matches!(ReferenceDb::load(&bad), Err(Error::Format { .. })));

        let mut db = ReferenceDb::new();
        db.insert(record("p", "c", axis(4, 0))).unwrap();
        let path = dir.path().join("ok.db");
        db.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.db");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        match ReferenceDb::load(&cut) {
            Err(Error::Format { offset, .. }) => {
                assert!(offset > 4, "offset {offset} should be past the header")
            }
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn file_size_matches_per_record_accounting_at_catalog_scale() {
        // 3288 records with short ids and no locals: the file must be exactly
        // header + sum of per-record sizes.
        let dim = 4;
        let mut db = ReferenceDb::new();
        let mut expected = 4 + 4; // magic + count
        for i in 0..3288 {
            let id = format!("product-{i:04}");
            let cat = format!("c{}", i % 7);
            db.insert(record(&id, &cat, axis(dim, i % dim))).unwrap();
            expected += 4 + id.len() + 4 + cat.len() + 4 + 4 * dim + 4;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.db");
        db.save(&path).unwrap();
        let meta = std::fs::metadata(&path).unwrap();
        assert_eq!(meta.len(), expected as u64);
        let loaded = ReferenceDb::load(&path).unwrap();
        assert_eq!(loaded.len(), 3288);
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.csv");
        std::fs::write(
            &path,
            "product_id,category_id,image_path\np1,cat_a,/tmp/p1.png\np2,cat_b,/tmp/p2.png\n",
        )
        .unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].product_id, "p1");
        assert_eq!(entries[1].image_path, "/tmp/p2.png");

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "product_id,category_id,image_path\nonly-one-field\n").unwrap();
        match read_manifest(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn build_embeds_manifest_images() {
        use crate::img::save_png;
        use crate::tensor::Tensor;

        let dir = tempfile::tempdir().unwrap();
        // Input 32 keeps the final feature map 3x3: a 1x1 map under randomly
        // initialised weights can land all-negative after ReLU, which leaves
        // nothing to normalise.
        let net = EmbedderNet::new(32, 4, 42).unwrap();
        let mut entries = Vec::new();
        let mut images = Vec::new();
        for i in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let data = (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect();
            let img = Tensor::new(vec![16, 16, 3], data).unwrap();
            let path = dir.path().join(format!("p{i}.png"));
            save_png(&img, &path).unwrap();
            entries.push(ManifestEntry {
                product_id: format!("p{i}"),
                category_id: "cat".into(),
                image_path: path.to_string_lossy().into_owned(),
            });
            images.push(path);
        }
        let db = build(&entries, &net, 2, 1).unwrap();
        assert_eq!(db.len(), 3);
        for (i, rec) in db.records().iter().enumerate() {
            let img = load_png(&images[i]).unwrap();
            assert_eq!(rec.descriptor, net.embed(&img).unwrap());
            assert!(!rec.locals.is_empty());
        }

        let mut dup = entries.clone();
        dup[1].product_id = "p0".into();
        assert!(matches!(
            build(&dup, &net, 2, 1),
            Err(Error::DuplicateProduct(_))
        ));

        let mut missing = entries.clone();
        missing[0].image_path = dir.path().join("absent.png").to_string_lossy().into_owned();
        assert!(matches!(build(&missing, &net, 2, 1), Err(Error::Io { .. })));
    }
}
