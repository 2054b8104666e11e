//! Categorical field schemas, one-hot encoding and UCI loaders.
//!
//! Every field keeps its vocabulary in first-occurrence order. Each field also
//! owns one reserved "unknown" slot at index `cardinality`, so embedding tables
//! are sized `cardinality + 1` rows and evaluation-time novel tokens never fail.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Token marking a missing value in the UCI files; kept as an ordinary category.
pub const MISSING_TOKEN: &str = "?";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub vocabulary: Vec<String>,
}

impl Field {
    pub fn cardinality(&self) -> usize {
        self.vocabulary.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "SchemaRepr", into = "SchemaRepr")]
pub struct FieldSchema {
    fields: Vec<Field>,
    lookup: Vec<HashMap<String, usize>>,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    fields: Vec<Field>,
}

impl From<SchemaRepr> for FieldSchema {
    fn from(repr: SchemaRepr) -> Self {
        FieldSchema::from_fields_unchecked(repr.fields)
    }
}

impl From<FieldSchema> for SchemaRepr {
    fn from(schema: FieldSchema) -> Self {
        SchemaRepr {
            fields: schema.fields,
        }
    }
}

impl PartialEq for FieldSchema {
    fn eq(&self, other: &Self) -> bool {
        self.fields == other.fields
    }
}

impl Eq for FieldSchema {}

impl FieldSchema {
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for f in &fields {
            if f.vocabulary.is_empty() {
                return Err(Error::Shape(format!("field {} has cardinality 0", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Shape(format!("duplicate field name {}", f.name)));
            }
        }
        Ok(Self::from_fields_unchecked(fields))
    }

    /// Schema whose vocabularies are the decimal strings `"0".."l-1"`.
    pub fn with_cardinalities(spec: &[(&str, usize)]) -> Result<Self> {
        let fields = spec
            .iter()
            .map(|(name, card)| Field {
                name: name.to_string(),
                vocabulary: (0..*card).map(|v| v.to_string()).collect(),
            })
            .collect();
        Self::new(fields)
    }

    fn from_fields_unchecked(fields: Vec<Field>) -> Self {
        let lookup = fields
            .iter()
            .map(|f| {
                f.vocabulary
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (t.clone(), i))
                    .collect()
            })
            .collect();
        FieldSchema { fields, lookup }
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    /// Number of fields, `L`.
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Number of unordered field pairs, `L(L-1)/2`.
    pub fn pair_count(&self) -> usize {
        let l = self.len();
        l * l.saturating_sub(1) / 2
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(Field::cardinality).collect()
    }

    /// Rows per field including the reserved unknown slot.
    pub fn table_rows(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.cardinality() + 1).collect()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<FeatureVector> {
        if tokens.len() != self.len() {
            return Err(Error::TokenCount {
                expected: self.len(),
                got: tokens.len(),
            });
        }
        let active = tokens
            .iter()
            .zip(&self.lookup)
            .zip(&self.fields)
            .map(|((t, map), f)| map.get(t.as_ref()).copied().unwrap_or(f.cardinality()))
            .collect();
        Ok(FeatureVector::new(active))
    }

    /// Maps indices back to tokens; the reserved slot decodes to `None`.
    pub fn decode(&self, x: &FeatureVector) -> Vec<Option<&str>> {
        x.active()
            .iter()
            .zip(&self.fields)
            .map(|(&i, f)| f.vocabulary.get(i).map(String::as_str))
            .collect()
    }

    pub fn validate(&self, x: &FeatureVector) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::TokenCount {
                expected: self.len(),
                got: x.len(),
            });
        }
        for (i, (&v, f)) in x.active().iter().zip(&self.fields).enumerate() {
            if v > f.cardinality() {
                return Err(Error::Shape(format!(
                    "field {i} index {v} exceeds cardinality {}",
                    f.cardinality()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over field names and vocabularies; identifies a schema in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for f in &self.fields {
            h.update((f.name.len() as u64).to_le_bytes());
            h.update(f.name.as_bytes());
            h.update((f.vocabulary.len() as u64).to_le_bytes());
            for t in &f.vocabulary {
                h.update((t.len() as u64).to_le_bytes());
                h.update(t.as_bytes());
            }
        }
        h.finalize().into()
    }

    /// Returns a schema with one more field appended.
    pub fn with_field(&self, field: Field) -> Result<Self> {
        let mut fields = self.fields.clone();
        fields.push(field);
        Self::new(fields)
    }
}

/// Strict one-hot categorical input: one active index per field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<usize>);

impl FeatureVector {
    pub fn new(active: Vec<usize>) -> Self {
        FeatureVector(active)
    }

    pub fn active(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with `value` appended as an extra field.
    pub fn extended(&self, value: usize) -> Self {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.extend_from_slice(&self.0);
        v.push(value);
        FeatureVector(v)
    }
}

impl From<Vec<usize>> for FeatureVector {
    fn from(v: Vec<usize>) -> Self {
        FeatureVector(v)
    }
}

/// A training example; `y` is binary for click-style rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: FeatureVector,
    pub y: f64,
}

impl LabeledExample {
    pub fn new(x: FeatureVector, y: f64) -> Self {
        LabeledExample { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Edibility {
    Safe,
    Poisonous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Income {
    Over50K,
    AtMost50K,
}

/// Incrementally grows first-occurrence vocabularies.
struct SchemaBuilder {
    names: Vec<String>,
    vocab: Vec<Vec<String>>,
    index: Vec<HashMap<String, usize>>,
}

impl SchemaBuilder {
    fn new(names: &[&str]) -> Self {
        SchemaBuilder {
            names: names.iter().map(|s| s.to_string()).collect(),
            vocab: vec![Vec::new(); names.len()],
            index: vec![HashMap::new(); names.len()],
        }
    }

    fn intern(&mut self, tokens: &[&str]) -> FeatureVector {
        let active = tokens
            .iter()
            .enumerate()
            .map(|(f, &t)| {
                if let Some(&i) = self.index[f].get(t) {
                    i
                } else {
                    let i = self.vocab[f].len();
                    self.vocab[f].push(t.to_string());
                    self.index[f].insert(t.to_string(), i);
                    i
                }
            })
            .collect();
        FeatureVector::new(active)
    }

    /// Fields that never received a token get a single placeholder category.
    fn finish(self) -> FieldSchema {
        let fields = self
            .names
            .into_iter()
            .zip(self.vocab)
            .map(|(name, mut vocabulary)| {
                if vocabulary.is_empty() {
                    vocabulary.push(MISSING_TOKEN.to_string());
                }
                Field { name, vocabulary }
            })
            .collect();
        FieldSchema::from_fields_unchecked(fields)
    }
}

pub const MUSHROOM_FIELDS: [&str; 22] = [
    "cap-shape",
    "cap-surface",
    "cap-color",
    "bruises",
    "odor",
    "gill-attachment",
    "gill-spacing",
    "gill-size",
    "gill-color",
    "stalk-shape",
    "stalk-root",
    "stalk-surface-above-ring",
    "stalk-surface-below-ring",
    "stalk-color-above-ring",
    "stalk-color-below-ring",
    "veil-type",
    "veil-color",
    "ring-number",
    "ring-type",
    "spore-print-color",
    "population",
    "habitat",
];

/// Column positions of the categorical attributes in `adult.data`.
const ADULT_CATEGORICAL: [(usize, &str); 8] = [
    (1, "workclass"),
    (3, "education"),
    (5, "marital-status"),
    (6, "occupation"),
    (7, "relationship"),
    (8, "race"),
    (9, "sex"),
    (13, "native-country"),
];
const ADULT_COLUMNS: usize = 15;

pub fn adult_field_names() -> Vec<&'static str> {
    ADULT_CATEGORICAL.iter().map(|(_, n)| *n).collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn split_tokens(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

/// Reads `agaricus-lepiota.data`: 23 tokens per row, class token first.
pub fn load_mushroom(path: impl AsRef<Path>) -> Result<(FieldSchema, Vec<(FeatureVector, Edibility)>)> {
    let text = read_text(path.as_ref())?;
    parse_mushroom(&text)
}

pub fn parse_mushroom(text: &str) -> Result<(FieldSchema, Vec<(FeatureVector, Edibility)>)> {
    let mut builder = SchemaBuilder::new(&MUSHROOM_FIELDS);
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens = split_tokens(line);
        if tokens.len() != MUSHROOM_FIELDS.len() + 1 {
            return Err(Error::parse(
                line_no,
                format!("expected {} columns, got {}", MUSHROOM_FIELDS.len() + 1, tokens.len()),
            ));
        }
        let label = match tokens[0] {
            "e" => Edibility::Safe,
            "p" => Edibility::Poisonous,
            other => return Err(Error::parse(line_no, format!("unknown class token {other:?}"))),
        };
        records.push((builder.intern(&tokens[1..]), label));
    }
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok((builder.finish(), records))
}

/// Reads one or more files in the `adult.data` / `adult.test` layout, sharing
/// one vocabulary across them in the order given.
pub fn load_adult_files<P: AsRef<Path>>(paths: &[P]) -> Result<(FieldSchema, Vec<(FeatureVector, Income)>)> {
    let mut builder = SchemaBuilder::new(&adult_field_names());
    let mut records = Vec::new();
    for p in paths {
        let text = read_text(p.as_ref())?;
        parse_adult_into(&text, &mut builder, &mut records)?;
    }
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok((builder.finish(), records))
}

pub fn load_adult(path: impl AsRef<Path>) -> Result<(FieldSchema, Vec<(FeatureVector, Income)>)> {
    load_adult_files(&[path])
}

pub fn parse_adult(text: &str) -> Result<(FieldSchema, Vec<(FeatureVector, Income)>)> {
    let mut builder = SchemaBuilder::new(&adult_field_names());
    let mut records = Vec::new();
    parse_adult_into(text, &mut builder, &mut records)?;
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok((builder.finish(), records))
}

fn parse_adult_into(
    text: &str,
    builder: &mut SchemaBuilder,
    records: &mut Vec<(FeatureVector, Income)>,
) -> Result<()> {
    let mut tokens_buf = Vec::with_capacity(ADULT_CATEGORICAL.len());
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let trimmed = line.trim();
        // adult.test opens with a "|1x3 Cross validator" banner
        if trimmed.is_empty() || trimmed.starts_with('|') {
            continue;
        }
        let tokens = split_tokens(trimmed);
        if tokens.len() != ADULT_COLUMNS {
            return Err(Error::parse(
                line_no,
                format!("expected {ADULT_COLUMNS} columns, got {}", tokens.len()),
            ));
        }
        let label = match tokens[ADULT_COLUMNS - 1].trim_end_matches('.') {
            ">50K" => Income::Over50K,
            "<=50K" => Income::AtMost50K,
            other => return Err(Error::parse(line_no, format!("unknown income label {other:?}"))),
        };
        tokens_buf.clear();
        tokens_buf.extend(ADULT_CATEGORICAL.iter().map(|&(c, _)| tokens[c]));
        records.push((builder.intern(&tokens_buf), label));
    }
    Ok(())
}

/// Internal record format written by `prep-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub schema: FieldSchema,
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub x: FeatureVector,
    /// Mushroom: edible. Adult: income over 50K.
    pub positive: bool,
}

impl Dataset {
    pub fn from_mushroom(schema: FieldSchema, rows: Vec<(FeatureVector, Edibility)>) -> Self {
        Dataset {
            name: "mushroom".into(),
            schema,
            records: rows
                .into_iter()
                .map(|(x, l)| DatasetRecord {
                    x,
                    positive: l == Edibility::Safe,
                })
                .collect(),
        }
    }

    pub fn from_adult(schema: FieldSchema, rows: Vec<(FeatureVector, Income)>) -> Self {
        Dataset {
            name: "adult".into(),
            schema,
            records: rows
                .into_iter()
                .map(|(x, l)| DatasetRecord {
                    x,
                    positive: l == Income::Over50K,
                })
                .collect(),
        }
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = read_text(path.as_ref())?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Loads a named UCI dataset from raw files, or from a `prep-data` JSON file.
pub fn load_dataset(name: &str, paths: &[PathBuf]) -> Result<Dataset> {
    if paths.len() == 1 && paths[0].extension().is_some_and(|e| e == "json") {
        return Dataset::load_json(&paths[0]);
    }
    match name {
        "mushroom" => {
            let [p] = paths else {
                return Err(Error::Config("mushroom expects exactly one input file".into()));
            };
            let (schema, rows) = load_mushroom(p)?;
            Ok(Dataset::from_mushroom(schema, rows))
        }
        "adult" => {
            let (schema, rows) = load_adult_files(paths)?;
            Ok(Dataset::from_adult(schema, rows))
        }
        other => Err(Error::Config(format!("unknown dataset {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MUSHROOM_HEAD: &str = "p,x,s,n,t,p,f,c,n,k,e,e,s,s,w,w,p,w,o,p,k,s,u\n\
e,x,s,y,t,a,f,c,b,k,e,c,s,s,w,w,p,w,o,p,n,n,g\n\
e,b,s,w,t,l,f,c,b,n,e,c,s,s,w,w,p,w,o,p,n,n,m\n\
p,k,y,n,f,y,f,c,n,b,t,?,s,k,w,w,p,w,o,e,w,v,l\n";

    #[test]
    fn mushroom_rows_parse_in_first_occurrence_order() {
        let (schema, rows) = parse_mushroom(MUSHROOM_HEAD).unwrap();
        assert_eq!(schema.len(), 22);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].1, Edibility::Poisonous);
        assert_eq!(rows[1].1, Edibility::Safe);
        assert_eq!(schema.decode(&rows[1].0)[0], Some("x"));
        assert_eq!(rows[1].0.active()[0], 0);
        assert_eq!(rows[2].0.active()[0], 1);
        // "?" in stalk-root is its own category
        assert_eq!(schema.decode(&rows[3].0)[10], Some("?"));
    }

    #[test]
    fn mushroom_errors() {
        assert!(matches!(parse_mushroom(""), Err(Error::NoRecords)));
        let bad = "e,x,s\n";
        assert!(matches!(parse_mushroom(bad), Err(Error::Parse { line: 1, .. })));
        let unknown = MUSHROOM_HEAD.replacen("p,x", "z,x", 1);
        let err = parse_mushroom(&unknown).unwrap_err();
        assert!(err.to_string().contains("class token"), "{err}");
        let second_bad = format!("{}e,x\n", MUSHROOM_HEAD);
        assert!(matches!(parse_mushroom(&second_bad), Err(Error::Parse { line: 5, .. })));
    }

    #[test]
    fn adult_labels_and_test_banner() {
        let text = "|1x3 Cross validator\n\
25, Private, 226802, 11th, 7, Never-married, Machine-op-inspct, Own-child, Black, Male, 0, 0, 40, United-States, <=50K.\n\
44, Private, 160323, Some-college, 10, Married-civ-spouse, Machine-op-inspct, Husband, Black, Male, 7688, 0, 40, United-States, >50K.\n\
\n";
        let (schema, rows) = parse_adult(text).unwrap();
        assert_eq!(schema.len(), 8);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].1, Income::AtMost50K);
        assert_eq!(rows[1].1, Income::Over50K);
        assert_eq!(schema.decode(&rows[0].0)[0], Some("Private"));
        assert_eq!(schema.decode(&rows[1].0)[2], Some("Married-civ-spouse"));
    }

    #[test]
    fn adult_short_row_names_line() {
        let text = "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K\n\
39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, <=50K\n";
        let err = parse_adult(text).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn encode_lookup_and_unknown_slot() {
        let schema = FieldSchema::new(vec![
            Field { name: "a".into(), vocabulary: vec!["a0".into(), "a1".into(), "a".into()] },
            Field { name: "b".into(), vocabulary: vec!["b".into()] },
            Field {
                name: "c".into(),
                vocabulary: (0..6).map(|i| if i == 5 { "c".to_string() } else { format!("c{i}") }).collect(),
            },
        ])
        .unwrap();
        assert_eq!(schema.encode(&["a", "b", "c"]).unwrap().active(), &[2, 0, 5]);
        assert_eq!(schema.encode(&["a0", "b", "c0"]).unwrap().active(), &[0, 0, 0]);
        assert_eq!(schema.encode(&["zzz", "b", "c0"]).unwrap().active(), &[3, 0, 0]);
        assert!(matches!(schema.encode(&["a", "b"]), Err(Error::TokenCount { expected: 3, got: 2 })));
        assert_eq!(schema.pair_count(), 3);
        assert_eq!(schema.table_rows(), vec![4, 2, 7]);
    }

    #[test]
    fn schema_rejects_duplicates_and_empty() {
        let dup = vec![
            Field { name: "a".into(), vocabulary: vec!["x".into()] },
            Field { name: "a".into(), vocabulary: vec!["y".into()] },
        ];
        assert!(FieldSchema::new(dup).is_err());
        let empty = vec![Field { name: "a".into(), vocabulary: vec![] }];
        assert!(FieldSchema::new(empty).is_err());
    }

    #[test]
    fn schema_json_round_trip_keeps_lookup() {
        let (schema, _) = parse_mushroom(MUSHROOM_HEAD).unwrap();
        let json = serde_json::to_string(&schema).unwrap();
        let back: FieldSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(back, schema);
        assert_eq!(back.hash(), schema.hash());
        let tokens: Vec<&str> = MUSHROOM_HEAD.lines().nth(1).unwrap().split(',').skip(1).collect();
        assert_eq!(back.encode(&tokens).unwrap(), schema.encode(&tokens).unwrap());
    }
}
