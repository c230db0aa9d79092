//! Label schemas, feature-CSV datasets, conflict filtering and per-user splits.
//!
//! Feature-CSV layout: a header row with `instance_id`, `user_id`, feature
//! columns prefixed `f_` and target columns prefixed `y_` holding `0`/`1`.
//! Empty and `NaN` feature cells are loaded as missing.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::signal::FeatureVector;

/// Conflict pairs that ship with every default schema.
pub const DEFAULT_CONFLICTS: [(&str, &str); 2] = [("On Table", "In Pocket"), ("Sleeping", "Running")];

/// Label universe: an exclusive context group and a co-occurring activity group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub contexts: Vec<String>,
    pub activities: Vec<String>,
    #[serde(default)]
    pub conflicts: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelGroup {
    Context,
    Activity,
}

impl LabelGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelGroup::Context => "context",
            LabelGroup::Activity => "activity",
        }
    }
}

impl LabelSchema {
    pub fn new(
        contexts: Vec<String>,
        activities: Vec<String>,
        conflicts: Vec<(String, String)>,
    ) -> Result<Self> {
        let schema = LabelSchema {
            contexts,
            activities,
            conflicts,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Adds the default conflict pairs whose labels both exist in the schema.
    pub fn with_default_conflicts(mut self) -> Self {
        for (a, b) in DEFAULT_CONFLICTS {
            let pair = (a.to_string(), b.to_string());
            if self.contains(a) && self.contains(b) && !self.conflicts.contains(&pair) {
                self.conflicts.push(pair);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts.is_empty() || self.activities.is_empty() {
            return Err(Error::Schema(
                "at least one context and one activity label are required".into(),
            ));
        }
        let mut seen = HashSet::new();
        for name in self.labels() {
            if name.is_empty() {
                return Err(Error::Schema("empty label name".into()));
            }
            if !seen.insert(name) {
                return Err(Error::Schema(format!("duplicate label `{name}`")));
            }
        }
        for (a, b) in &self.conflicts {
            for name in [a, b] {
                if !seen.contains(name.as_str()) {
                    return Err(Error::Schema(format!(
                        "conflict rule references unknown label `{name}`"
                    )));
                }
            }
            if a == b {
                return Err(Error::Schema(format!("conflict rule pairs `{a}` with itself")));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: LabelSchema =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// All labels, contexts first, in schema order.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.contexts
            .iter()
            .chain(self.activities.iter())
            .map(String::as_str)
    }

    pub fn num_labels(&self) -> usize {
        self.contexts.len() + self.activities.len()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.group_of(label).is_some()
    }

    pub fn group_of(&self, label: &str) -> Option<LabelGroup> {
        if self.contexts.iter().any(|c| c == label) {
            Some(LabelGroup::Context)
        } else if self.activities.iter().any(|a| a == label) {
            Some(LabelGroup::Activity)
        } else {
            None
        }
    }

    /// Column index of a label in the combined `[contexts.., activities..]` order.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels().position(|l| l == label)
    }
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub instance_id: String,
    pub user_id: String,
    pub features: FeatureVector,
    pub targets: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: LabelSchema,
    /// Feature names without the `f_` prefix.
    pub feature_names: Vec<String>,
    pub instances: Vec<Instance>,
    pub provenance: String,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Copy of this dataset holding only the given instances.
    pub fn with_instances(&self, instances: Vec<Instance>, provenance: String) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            feature_names: self.feature_names.clone(),
            instances,
            provenance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let dim = self.feature_dim();
        for inst in &self.instances {
            if inst.features.len() != dim {
                return Err(Error::Dimension(format!(
                    "instance `{}` has {} features, expected {dim}",
                    inst.instance_id,
                    inst.features.len()
                )));
            }
            if let Some(bad) = inst.targets.iter().find(|t| !self.schema.contains(t)) {
                return Err(Error::SchemaMismatch(format!(
                    "instance `{}` has label `{bad}` outside the schema",
                    inst.instance_id
                )));
            }
        }
        Ok(())
    }
}

/// Reads a feature-CSV file.
pub fn load_feature_dataset(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };

    let headers = reader
        .headers()
        .map_err(|e| parse_err(0, "", e.to_string()))?
        .clone();
    let mut id_col = None;
    let mut user_col = None;
    let mut feature_cols = Vec::new();
    let mut target_cols = Vec::new();
    for (i, name) in headers.iter().enumerate() {
        if name == "instance_id" {
            id_col = Some(i);
        } else if name == "user_id" {
            user_col = Some(i);
        } else if let Some(feat) = name.strip_prefix("f_") {
            feature_cols.push((i, feat.to_string()));
        } else if let Some(label) = name.strip_prefix("y_") {
            if !schema.contains(label) {
                return Err(parse_err(0, name, "target column not in schema".into()));
            }
            if target_cols.iter().any(|(_, l): &(usize, String)| l == label) {
                return Err(parse_err(0, name, "duplicate target column".into()));
            }
            target_cols.push((i, label.to_string()));
        } else {
            return Err(parse_err(0, name, "unexpected column".into()));
        }
    }
    let id_col = id_col.ok_or_else(|| parse_err(0, "instance_id", "missing column".into()))?;
    let user_col = user_col.ok_or_else(|| parse_err(0, "user_id", "missing column".into()))?;

    let mut seen_ids = HashSet::new();
    let mut instances = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| parse_err(row, "", e.to_string()))?;
        let instance_id = record[id_col].to_string();
        if !seen_ids.insert(instance_id.clone()) {
            return Err(parse_err(row, "instance_id", format!("duplicate instance_id `{instance_id}`")));
        }
        let mut values = Vec::with_capacity(feature_cols.len());
        let mut missing = Vec::with_capacity(feature_cols.len());
        for (col, name) in &feature_cols {
            let cell = record[*col].trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                values.push(0.0);
                missing.push(true);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, &format!("f_{name}"), format!("non-numeric value `{cell}`")))?;
            if !v.is_finite() {
                return Err(parse_err(row, &format!("f_{name}"), format!("non-finite value `{cell}`")));
            }
            values.push(v);
            missing.push(false);
        }
        let mut targets = BTreeSet::new();
        for (col, label) in &target_cols {
            match record[*col].trim() {
                "0" => {}
                "1" => {
                    targets.insert(label.clone());
                }
                other => {
                    return Err(parse_err(row, &format!("y_{label}"), format!("expected 0 or 1, got `{other}`")))
                }
            }
        }
        instances.push(Instance {
            instance_id,
            user_id: record[user_col].to_string(),
            features: FeatureVector { values, missing },
            targets,
        });
    }

    Ok(Dataset {
        schema: schema.clone(),
        feature_names: feature_cols.into_iter().map(|(_, n)| n).collect(),
        instances,
        provenance: format!("feature-csv:{}", path.display()),
    })
}

/// Writes a dataset in feature-CSV format with one `y_` column per schema label.
pub fn write_feature_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut writer = csv::Writer::from_path(path).map_err(to_err)?;
    let mut header = vec!["instance_id".to_string(), "user_id".to_string()];
    header.extend(dataset.feature_names.iter().map(|n| format!("f_{n}")));
    header.extend(dataset.schema.labels().map(|l| format!("y_{l}")));
    writer.write_record(&header).map_err(to_err)?;
    for inst in &dataset.instances {
        let mut row = vec![inst.instance_id.clone(), inst.user_id.clone()];
        for (v, &m) in inst.features.values.iter().zip(&inst.features.missing) {
            row.push(if m { "NaN".to_string() } else { format!("{v}") });
        }
        for label in dataset.schema.labels() {
            row.push(if inst.targets.contains(label) { "1" } else { "0" }.to_string());
        }
        writer.write_record(&row).map_err(to_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub const CONTEXT_EXCLUSIVITY_RULE: &str = "context-exclusivity";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterReport {
    pub removed: usize,
    /// Rule name -> number of removed instances violating it. An instance that
    /// violates several rules is counted under each.
    pub per_rule: BTreeMap<String, usize>,
}

/// Names of the rules the target set violates.
fn violated_rules(schema: &LabelSchema, targets: &BTreeSet<String>) -> Vec<String> {
    let mut rules = Vec::new();
    let contexts = schema.contexts.iter().filter(|c| targets.contains(*c)).count();
    if contexts > 1 {
        rules.push(CONTEXT_EXCLUSIVITY_RULE.to_string());
    }
    for (a, b) in &schema.conflicts {
        if targets.contains(a) && targets.contains(b) {
            rules.push(format!("{a} + {b}"));
        }
    }
    rules
}

/// Drops instances holding more than one context label or any configured
/// conflict pair. Instances with no labels at all are kept.
pub fn filter_conflicts(dataset: &Dataset) -> (Dataset, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::with_capacity(dataset.len());
    for inst in &dataset.instances {
        let rules = violated_rules(&dataset.schema, &inst.targets);
        if rules.is_empty() {
            kept.push(inst.clone());
        } else {
            report.removed += 1;
            for rule in rules {
                *report.per_rule.entry(rule).or_default() += 1;
            }
        }
    }
    (dataset.with_instances(kept, dataset.provenance.clone()), report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn standard(seed: u64) -> Self {
        SplitSpec {
            ratios: [0.6, 0.2, 0.2],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be non-negative, got {:?}",
                self.ratios
            )));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Part sizes for `n` instances: floor for train and validation, the rest to test.
    pub fn part_sizes(&self, n: usize) -> [usize; 3] {
        let floor = |r: f64| (((n as f64) * r + 1e-9).floor() as usize).min(n);
        let train = floor(self.ratios[0]);
        let val = floor(self.ratios[1]).min(n - train);
        [train, val, n - train - val]
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Per-user seeded shuffle followed by a ratio partition. Each part keeps the
/// input order of its instances.
pub fn split_dataset(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut by_user: Vec<(String, Vec<usize>)> = Vec::new();
    let mut user_pos: HashMap<&str, usize> = HashMap::new();
    for (i, inst) in dataset.instances.iter().enumerate() {
        let pos = *user_pos.entry(inst.user_id.as_str()).or_insert_with(|| {
            by_user.push((inst.user_id.clone(), Vec::new()));
            by_user.len() - 1
        });
        by_user[pos].1.push(i);
    }

    let mut parts: [Vec<usize>; 3] = Default::default();
    for (user, mut indices) in by_user {
        let mut rng = rng::rng_for(spec.seed, &format!("split/{user}"));
        indices.shuffle(&mut rng);
        let [train, val, _] = spec.part_sizes(indices.len());
        parts[0].extend_from_slice(&indices[..train]);
        parts[1].extend_from_slice(&indices[train..train + val]);
        parts[2].extend_from_slice(&indices[train + val..]);
    }

    let names = ["train", "validation", "test"];
    let mut out = parts.into_iter().zip(names).map(|(mut idx, name)| {
        idx.sort_unstable();
        let instances = idx.iter().map(|&i| dataset.instances[i].clone()).collect();
        dataset.with_instances(instances, format!("{}#{name}", dataset.provenance))
    });
    Ok(Split {
        train: out.next().unwrap(),
        validation: out.next().unwrap(),
        test: out.next().unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema() -> LabelSchema {
        LabelSchema::new(
            vec!["In Pocket".into(), "On Table".into(), "In Hand".into()],
            vec![
                "Walking".into(),
                "Sleeping".into(),
                "Running".into(),
                "Talking On Phone".into(),
            ],
            vec![],
        )
        .unwrap()
        .with_default_conflicts()
    }

    fn instance(id: &str, user: &str, labels: &[&str]) -> Instance {
        Instance {
            instance_id: id.into(),
            user_id: user.into(),
            features: FeatureVector::from_values(vec![0.0]),
            targets: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn dataset(instances: Vec<Instance>) -> Dataset {
        Dataset {
            schema: schema(),
            feature_names: vec!["a".into()],
            instances,
            provenance: "test".into(),
        }
    }

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_rows() {
        let f = write_tmp(
            "instance_id,user_id,f_a,f_b,f_c,f_d,y_Walking,y_In Pocket\n\
             i1,u1,1,2,3,4,1,0\n\
             i2,u1,5,6,7,8,0,1\n\
             i3,u2,9,10,11,12,1,1\n",
        );
        let ds = load_feature_dataset(f.path(), &schema()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.feature_names, vec!["a", "b", "c", "d"]);
        assert_eq!(ds.instances[1].features.values, vec![5.0, 6.0, 7.0, 8.0]);
        assert!(ds.instances[2].targets.contains("Walking"));
        assert!(ds.instances[2].targets.contains("In Pocket"));
        ds.validate().unwrap();
    }

    #[test]
    fn unknown_label_column_is_named() {
        let f = write_tmp("instance_id,user_id,f_a,y_Dancing\ni1,u1,1,0\n");
        let err = load_feature_dataset(f.path(), &schema()).unwrap_err();
        assert!(err.to_string().contains("y_Dancing"), "{err}");
    }

    #[test]
    fn nan_cell_is_missing() {
        let f = write_tmp("instance_id,user_id,f_a,f_b\ni1,u1,NaN,2\ni2,u1,,3\n");
        let ds = load_feature_dataset(f.path(), &schema()).unwrap();
        assert_eq!(ds.instances[0].features.missing, vec![true, false]);
        assert_eq!(ds.instances[1].features.missing, vec![true, false]);
        assert_eq!(ds.instances[0].features.values[1], 2.0);
    }

    #[test]
    fn nan_round_trips_through_writer() {
        let f = write_tmp("instance_id,user_id,f_a,f_b,y_Walking\ni1,u1,NaN,0.1,1\ni2,u1,1e-300,-3.25,0\n");
        let ds = load_feature_dataset(f.path(), &schema()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_feature_dataset(&ds, out.path()).unwrap();
        let back = load_feature_dataset(out.path(), &schema()).unwrap();
        assert_eq!(back.instances, ds.instances);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let cases = [
            ("instance_id,f_a\ni1,1\n", "user_id"),
            ("instance_id,user_id,f_a,extra\ni1,u1,1,2\n", "extra"),
            ("instance_id,user_id,f_a\ni1,u1,abc\n", "f_a"),
            ("instance_id,user_id,f_a\ni1,u1,1\ni1,u2,2\n", "duplicate"),
            ("instance_id,user_id,f_a,y_Walking\ni1,u1,1,2\n", "y_Walking"),
        ];
        for (text, needle) in cases {
            let f = write_tmp(text);
            let err = load_feature_dataset(f.path(), &schema()).unwrap_err().to_string();
            assert!(err.contains(needle), "{err} should mention {needle}");
        }
    }

    #[test]
    fn schema_validation() {
        assert!(LabelSchema::new(vec![], vec!["a".into()], vec![]).is_err());
        assert!(LabelSchema::new(vec!["a".into()], vec!["a".into()], vec![]).is_err());
        assert!(LabelSchema::new(
            vec!["a".into()],
            vec!["b".into()],
            vec![("a".into(), "zz".into())]
        )
        .is_err());
        let s = schema();
        assert_eq!(s.conflicts.len(), 2);
        assert_eq!(s.index_of("Walking"), Some(3));
    }

    #[test]
    fn schema_json_keys() {
        let s: LabelSchema = serde_json::from_str(
            r#"{"contexts":["In Hand"],"activities":["Walking"],"conflicts":[]}"#,
        )
        .unwrap();
        assert_eq!(s.contexts, vec!["In Hand"]);
    }

    #[test]
    fn conflict_filter_examples() {
        let ds = dataset(vec![
            instance("a", "u", &["On Table", "In Pocket"]),
            instance("b", "u", &["Sleeping", "Running"]),
            instance("c", "u", &["Walking", "Talking On Phone"]),
            instance("d", "u", &[]),
        ]);
        let (kept, report) = filter_conflicts(&ds);
        let ids: Vec<_> = kept.instances.iter().map(|i| i.instance_id.as_str()).collect();
        assert_eq!(ids, vec!["c", "d"]);
        assert_eq!(report.removed, 2);
        assert_eq!(report.per_rule[CONTEXT_EXCLUSIVITY_RULE], 1);
        assert_eq!(report.per_rule["On Table + In Pocket"], 1);
        assert_eq!(report.per_rule["Sleeping + Running"], 1);
        let (again, r2) = filter_conflicts(&kept);
        assert_eq!(again, kept);
        assert_eq!(r2.removed, 0);
    }

    #[test]
    fn split_sizes() {
        for (n, expected) in [(10, [6, 2, 2]), (5, [3, 1, 1])] {
            let ds = dataset((0..n).map(|i| instance(&i.to_string(), "u", &[])).collect());
            let s = split_dataset(&ds, &SplitSpec::standard(3)).unwrap();
            assert_eq!([s.train.len(), s.validation.len(), s.test.len()], expected);
        }
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let ds = dataset(vec![instance("a", "u", &[])]);
        let spec = SplitSpec {
            ratios: [0.5, 0.2, 0.2],
            seed: 0,
        };
        assert!(split_dataset(&ds, &spec).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let ds = dataset((0..40).map(|i| instance(&i.to_string(), &format!("u{}", i % 3), &[])).collect());
        let a = split_dataset(&ds, &SplitSpec::standard(11)).unwrap();
        let b = split_dataset(&ds, &SplitSpec::standard(11)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = split_dataset(&ds, &SplitSpec::standard(12)).unwrap();
        assert_ne!(a.train, c.train);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_is_exhaustive_and_disjoint(
                users in prop::collection::vec(0usize..5, 1..80),
                seed in any::<u64>(),
            ) {
                let ds = dataset(users.iter().enumerate()
                    .map(|(i, u)| instance(&i.to_string(), &format!("u{u}"), &[]))
                    .collect());
                let s = split_dataset(&ds, &SplitSpec::standard(seed)).unwrap();
                let mut ids: Vec<String> = s.train.instances.iter()
                    .chain(&s.validation.instances)
                    .chain(&s.test.instances)
                    .map(|i| i.instance_id.clone())
                    .collect();
                prop_assert_eq!(ids.len(), ds.len());
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), ds.len());

                for u in 0..5 {
                    let user = format!("u{u}");
                    let n = ds.instances.iter().filter(|i| i.user_id == user).count() as f64;
                    let count = |d: &Dataset| d.instances.iter().filter(|i| i.user_id == user).count() as f64;
                    prop_assert!((count(&s.train) - 0.6 * n).abs() <= 1.0);
                    prop_assert!((count(&s.validation) - 0.2 * n).abs() <= 1.0);
                    // test absorbs both floor remainders
                    prop_assert!((count(&s.test) - 0.2 * n).abs() < 2.0);
                }
            }

            #[test]
            fn filtering_is_idempotent(sets in prop::collection::vec(prop::collection::vec(0usize..7, 0..4), 0..30)) {
                let names: Vec<String> = schema().labels().map(String::from).collect();
                let ds = dataset(sets.iter().enumerate().map(|(i, s)| {
                    let labels: Vec<&str> = s.iter().map(|&k| names[k].as_str()).collect();
                    instance(&i.to_string(), "u", &labels)
                }).collect());
                let (once, _) = filter_conflicts(&ds);
                let (twice, report) = filter_conflicts(&once);
                prop_assert_eq!(report.removed, 0);
                prop_assert_eq!(once, twice);
            }
        }
    }
}
