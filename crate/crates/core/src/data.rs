//! Delimited text -> per-field feature indices.
//!
//! Each line is `label<D>v_1<D>...<D>v_f` with no header. Categorical values
//! are used verbatim as tokens; continuous values are bucketed into tokens
//! first so every field goes through the same embedding path. Index 0 of
//! every field is reserved for missing and out-of-vocabulary tokens.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::Rng;

pub const MISSING_TOKEN: &str = "MISSING";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: expected {expected} columns (label + fields), found {found}")]
    Malformed {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: label '{value}' is not 0 or 1")]
    BadLabel { line: usize, value: String },
    #[error("schema must declare at least one field")]
    EmptySchema,
    #[error("duplicate field name '{0}'")]
    DuplicateField(String),
    #[error("unknown field kind '{0}': expected categorical or continuous")]
    BadFieldKind(String),
    #[error("fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("{signal} signal fields requested but only {fields} fields exist")]
    TooManySignalFields { signal: usize, fields: usize },
    #[error("vocabulary line {line}: {msg}")]
    VocabFormat { line: usize, msg: String },
    #[error("token {0:?} contains a tab or newline and cannot be persisted")]
    UnpersistableToken(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Categorical,
    Continuous,
}

impl FromStr for FieldKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "categorical" | "cat" | "c" => Ok(FieldKind::Categorical),
            "continuous" | "num" | "numeric" | "n" => Ok(FieldKind::Continuous),
            other => Err(DataError::BadFieldKind(other.to_string())),
        }
    }
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Categorical => "categorical",
            FieldKind::Continuous => "continuous",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub kind: FieldKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    fields: Vec<Field>,
}

impl FieldSchema {
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        if fields.is_empty() {
            return Err(DataError::EmptySchema);
        }
        let mut seen = BTreeSet::new();
        for f in &fields {
            if !seen.insert(f.name.as_str()) {
                return Err(DataError::DuplicateField(f.name.clone()));
            }
        }
        Ok(FieldSchema { fields })
    }

    /// `n` categorical fields named `c0..c{n-1}`.
    pub fn categorical(n: usize) -> Result<Self> {
        FieldSchema::new(
            (0..n)
                .map(|i| Field {
                    name: format!("c{i}"),
                    kind: FieldKind::Categorical,
                })
                .collect(),
        )
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.fields.iter().map(|f| f.name.as_str()).collect()
    }
}

/// One unparsed record: the label text and one value per field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRow {
    pub line: usize,
    pub label: String,
    pub values: Vec<String>,
}

pub fn read_rows<R: BufRead>(reader: R, delimiter: char, schema: &FieldSchema) -> Result<Vec<RawRow>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        rows.push(parse_row(line, i + 1, delimiter, schema)?);
    }
    Ok(rows)
}

pub fn parse_row(line: &str, line_no: usize, delimiter: char, schema: &FieldSchema) -> Result<RawRow> {
    let mut cols = line.split(delimiter);
    let label = cols.next().unwrap_or_default().to_string();
    let values: Vec<String> = cols.map(str::to_string).collect();
    if values.len() != schema.len() {
        return Err(DataError::Malformed {
            line: line_no,
            expected: schema.len() + 1,
            found: values.len() + 1,
        });
    }
    Ok(RawRow {
        line: line_no,
        label,
        values,
    })
}

pub fn write_rows<W: Write>(mut out: W, rows: &[RawRow], delimiter: char) -> Result<()> {
    let mut sep = [0u8; 4];
    let sep = delimiter.encode_utf8(&mut sep);
    for row in rows {
        out.write_all(row.label.as_bytes())?;
        for v in &row.values {
            out.write_all(sep.as_bytes())?;
            out.write_all(v.as_bytes())?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Bucket a continuous value: `floor(ln(v)^2)` above 2, the truncated
/// integer value otherwise. Missing or NaN maps to [`MISSING_TOKEN`].
pub fn discretize_continuous(value: Option<f64>) -> String {
    match value {
        Some(v) if v.is_finite() => {
            if v > 2.0 {
                let l = v.ln();
                format!("{}", (l * l).floor() as i64)
            } else {
                format!("{}", v.trunc() as i64)
            }
        }
        _ => MISSING_TOKEN.to_string(),
    }
}

fn token_for(raw: &str, kind: FieldKind) -> String {
    let raw = raw.trim();
    match kind {
        FieldKind::Categorical if raw.is_empty() => MISSING_TOKEN.to_string(),
        FieldKind::Categorical => raw.to_string(),
        FieldKind::Continuous => discretize_continuous(raw.parse::<f64>().ok()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FieldVocab {
    name: String,
    index: HashMap<String, u32>,
    tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    fields: Vec<FieldVocab>,
}

impl Vocabulary {
    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn cardinality(&self, field: usize) -> usize {
        self.fields[field].tokens.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.tokens.len()).collect()
    }

    pub fn field_names(&self) -> Vec<&str> {
        self.fields.iter().map(|f| f.name.as_str()).collect()
    }

    /// Index of `token` in `field`; 0 if unseen.
    pub fn lookup(&self, field: usize, token: &str) -> u32 {
        self.fields[field].index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, field: usize, index: u32) -> Option<&str> {
        self.fields[field].tokens.get(index as usize).map(String::as_str)
    }

    /// `field<TAB>token<TAB>index` lines in schema order, then by index. The
    /// reserved index 0 is written too so empty fields keep cardinality 1.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for f in &self.fields {
            for (i, tok) in f.tokens.iter().enumerate() {
                if tok.contains(['\t', '\n']) {
                    return Err(DataError::UnpersistableToken(tok.clone()));
                }
                writeln!(out, "{}\t{}\t{}", f.name, tok, i)?;
            }
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut fields: Vec<FieldVocab> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| DataError::VocabFormat {
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split('\t');
            let (Some(name), Some(tok), Some(idx), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected field<TAB>token<TAB>index"));
            };
            let idx: u32 = idx.parse().map_err(|_| bad("index is not an integer"))?;
            if fields.last().map(|f| f.name.as_str()) != Some(name) {
                if fields.iter().any(|f| f.name == name) {
                    return Err(bad("field lines are not contiguous"));
                }
                fields.push(FieldVocab {
                    name: name.to_string(),
                    index: HashMap::new(),
                    tokens: Vec::new(),
                });
            }
            let fv = fields.last_mut().expect("pushed above");
            if idx as usize != fv.tokens.len() {
                return Err(bad("indices must be dense and ascending from 0"));
            }
            if idx > 0 {
                fv.index.insert(tok.to_string(), idx);
            }
            fv.tokens.push(tok.to_string());
        }
        Ok(Vocabulary { fields })
    }
}

/// Tokens seen at least `min_count` times get indices `1..` in lexicographic
/// order; everything else falls to 0.
pub fn build_vocab(rows: &[RawRow], schema: &FieldSchema, min_count: usize) -> Result<Vocabulary> {
    let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); schema.len()];
    for row in rows {
        if row.values.len() != schema.len() {
            return Err(DataError::Malformed {
                line: row.line,
                expected: schema.len() + 1,
                found: row.values.len() + 1,
            });
        }
        for (i, (raw, field)) in row.values.iter().zip(schema.fields()).enumerate() {
            let tok = token_for(raw, field.kind);
            if tok != MISSING_TOKEN {
                *counts[i].entry(tok).or_insert(0) += 1;
            }
        }
    }
    let fields = schema
        .fields()
        .iter()
        .zip(counts)
        .map(|(field, counts)| {
            let mut kept: Vec<String> = counts
                .into_iter()
                .filter(|(_, c)| *c >= min_count.max(1))
                .map(|(t, _)| t)
                .collect();
            kept.sort_unstable();
            let mut tokens = Vec::with_capacity(kept.len() + 1);
            tokens.push(MISSING_TOKEN.to_string());
            tokens.extend(kept);
            let index = tokens
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, t)| (t.clone(), i as u32))
                .collect();
            FieldVocab {
                name: field.name.clone(),
                index,
                tokens,
            }
        })
        .collect();
    Ok(Vocabulary { fields })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInstance {
    pub indices: Vec<u32>,
    pub label: u8,
}

pub fn parse_label(raw: &str, line: usize) -> Result<u8> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(0),
        Ok(v) if v == 1.0 => Ok(1),
        _ => Err(DataError::BadLabel {
            line,
            value: raw.to_string(),
        }),
    }
}

pub fn encode_instance(row: &RawRow, schema: &FieldSchema, vocab: &Vocabulary) -> Result<EncodedInstance> {
    if row.values.len() != schema.len() {
        return Err(DataError::Malformed {
            line: row.line,
            expected: schema.len() + 1,
            found: row.values.len() + 1,
        });
    }
    let label = parse_label(&row.label, row.line)?;
    let indices = row
        .values
        .iter()
        .zip(schema.fields())
        .enumerate()
        .map(|(i, (raw, field))| vocab.lookup(i, &token_for(raw, field.kind)))
        .collect();
    Ok(EncodedInstance { indices, label })
}

/// Encoded instances sharing one field layout.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub instances: Vec<EncodedInstance>,
}

impl Dataset {
    pub fn new(instances: Vec<EncodedInstance>) -> Self {
        Dataset { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.instances.iter().filter(|i| i.label == 1).count()
    }
}

pub fn encode_rows(rows: &[RawRow], schema: &FieldSchema, vocab: &Vocabulary) -> Result<Dataset> {
    rows.iter()
        .map(|r| encode_instance(r, schema, vocab))
        .collect::<Result<Vec<_>>>()
        .map(Dataset::new)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(DataError::InvalidFraction(fraction))
    }
}

/// Seeded shuffle of `0..n`, cut after the first `floor(n * fraction)`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_fraction(fraction)?;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, "split").shuffle(&mut order);
    let cut = (n as f64 * fraction).floor() as usize;
    let rest = order.split_off(cut);
    Ok((order, rest))
}

/// Seeded shuffle, then the first `floor(n * fraction)` instances go to the
/// first part and the remainder to the second.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(dataset.len(), fraction, seed)?;
    let take = |ix: &[usize]| Dataset::new(ix.iter().map(|&i| dataset.instances[i].clone()).collect());
    Ok((take(&a), take(&b)))
}

#[derive(Debug, Clone)]
pub struct EncodedBatch<'a> {
    pub instances: Vec<&'a EncodedInstance>,
}

impl EncodedBatch<'_> {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// One epoch's worth of minibatches in a seeded order; the last may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Vec<EncodedBatch<'_>>> {
    if batch_size == 0 {
        return Err(DataError::InvalidBatchSize);
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    Rng::derive(shuffle_seed, "batches").shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| EncodedBatch {
            instances: chunk.iter().map(|&i| &dataset.instances[i]).collect(),
        })
        .collect())
}

/// Parameters of the planted-signal generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub fields: usize,
    pub signal_fields: usize,
    pub rows: usize,
    /// Distinct tokens per field.
    pub cardinality: usize,
    /// Scale applied to the hidden logit before sampling labels.
    pub strength: f64,
    pub seed: u64,
}

impl PlantedConfig {
    pub fn new(fields: usize, signal_fields: usize, rows: usize, seed: u64) -> Self {
        PlantedConfig {
            fields,
            signal_fields,
            rows,
            cardinality: 100,
            strength: 1.0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub schema: FieldSchema,
    pub rows: Vec<RawRow>,
    /// Positions of the fields the label depends on.
    pub signal_fields: Vec<usize>,
}

/// Categorical data whose labels follow a fixed logistic rule over hidden
/// per-token weights of the first `signal_fields` fields. The hidden logit is
/// a sum of per-token main effects plus a product interaction between each
/// consecutive pair of signal fields; all other fields are drawn
/// independently of the label.
pub fn synthesize_planted(cfg: &PlantedConfig) -> Result<SyntheticData> {
    if cfg.signal_fields > cfg.fields {
        return Err(DataError::TooManySignalFields {
            signal: cfg.signal_fields,
            fields: cfg.fields,
        });
    }
    let schema = FieldSchema::categorical(cfg.fields)?;
    let card = cfg.cardinality.max(1);
    let mut hidden = Rng::derive(cfg.seed, "planted.weights");
    let main: Vec<Vec<f64>> = (0..cfg.signal_fields)
        .map(|_| (0..card).map(|_| hidden.normal()).collect())
        .collect();
    let inter: Vec<Vec<f64>> = (0..cfg.signal_fields)
        .map(|_| (0..card).map(|_| hidden.normal()).collect())
        .collect();
    let norm = (cfg.signal_fields.max(1) as f64).sqrt();

    let mut draw = Rng::derive(cfg.seed, "planted.rows");
    let mut rows = Vec::with_capacity(cfg.rows);
    for line in 0..cfg.rows {
        let toks: Vec<usize> = (0..cfg.fields).map(|_| draw.below(card)).collect();
        let mut z = 0.0;
        for s in 0..cfg.signal_fields {
            z += main[s][toks[s]];
            if s + 1 < cfg.signal_fields {
                z += inter[s][toks[s]] * inter[s + 1][toks[s + 1]];
            }
        }
        let p = crate::tensor::sigmoid(cfg.strength * z / norm);
        let label = if draw.bernoulli(p) { "1" } else { "0" };
        rows.push(RawRow {
            line: line + 1,
            label: label.to_string(),
            values: toks.iter().map(|t| format!("t{t}")).collect(),
        });
    }
    Ok(SyntheticData {
        schema,
        rows,
        signal_fields: (0..cfg.signal_fields).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema1() -> FieldSchema {
        FieldSchema::categorical(1).unwrap()
    }

    fn rows_of(tokens: &[&str]) -> Vec<RawRow> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| RawRow {
                line: i + 1,
                label: "0".into(),
                values: vec![t.to_string()],
            })
            .collect()
    }

    #[test]
    fn vocab_min_count() {
        let v = build_vocab(&rows_of(&["a", "a", "b"]), &schema1(), 2).unwrap();
        assert_eq!(v.lookup(0, "a"), 1);
        assert_eq!(v.lookup(0, "b"), 0);
        assert_eq!(v.cardinality(0), 2);

        let v = build_vocab(&rows_of(&["x", "y"]), &schema1(), 1).unwrap();
        assert_eq!(v.cardinality(0), 3);

        let s = FieldSchema::categorical(3).unwrap();
        let v = build_vocab(&[], &s, 1).unwrap();
        assert_eq!(v.cardinalities(), vec![1, 1, 1]);
    }

    #[test]
    fn malformed_row_reports_line() {
        let s = FieldSchema::categorical(2).unwrap();
        let text = "1\ta\tb\n0\ta\n";
        let err = read_rows(text.as_bytes(), '\t', &s).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 2, expected: 3, found: 2 }));
    }

    #[test]
    fn schema_rejects_duplicates_and_empty() {
        assert!(matches!(FieldSchema::new(vec![]), Err(DataError::EmptySchema)));
        let f = Field {
            name: "a".into(),
            kind: FieldKind::Categorical,
        };
        assert!(matches!(
            FieldSchema::new(vec![f.clone(), f]),
            Err(DataError::DuplicateField(_))
        ));
    }

    #[test]
    fn discretization_rule() {
        assert_eq!(discretize_continuous(None), MISSING_TOKEN);
        assert_eq!(discretize_continuous(Some(f64::NAN)), MISSING_TOKEN);
        assert_eq!(discretize_continuous(Some(1.0)), "1");
        assert_eq!(discretize_continuous(Some(2.0)), "2");
        assert_eq!(discretize_continuous(Some(-1.0)), "-1");
        // (ln 100)^2 = 21.2076...
        assert_eq!(discretize_continuous(Some(100.0)), "21");
    }

    #[test]
    fn missing_continuous_maps_to_reserved_index() {
        let schema = FieldSchema::new(vec![Field {
            name: "i1".into(),
            kind: FieldKind::Continuous,
        }])
        .unwrap();
        let rows = read_rows("1\t100\n0\t\n1\t100\n".as_bytes(), '\t', &schema).unwrap();
        let v = build_vocab(&rows, &schema, 1).unwrap();
        assert_eq!(v.lookup(0, "21"), 1);
        let ds = encode_rows(&rows, &schema, &v).unwrap();
        assert_eq!(ds.instances[0].indices, vec![1]);
        assert_eq!(ds.instances[1].indices, vec![0]);
    }

    #[test]
    fn encode_known_unknown_and_labels() {
        let s = FieldSchema::categorical(2).unwrap();
        let rows = read_rows("1,a,x\n0,b,x\n".as_bytes(), ',', &s).unwrap();
        let v = build_vocab(&rows, &s, 1).unwrap();
        let e = encode_instance(&rows[0], &s, &v).unwrap();
        assert_eq!(e.indices, vec![v.lookup(0, "a"), v.lookup(1, "x")]);
        assert_eq!(e.label, 1);
        assert_eq!(encode_instance(&rows[1], &s, &v).unwrap().label, 0);

        let unseen = parse_row("0,zz,qq", 9, ',', &s).unwrap();
        assert_eq!(encode_instance(&unseen, &s, &v).unwrap().indices, vec![0, 0]);

        let bad = parse_row("yes,a,x", 4, ',', &s).unwrap();
        assert!(matches!(
            encode_instance(&bad, &s, &v),
            Err(DataError::BadLabel { line: 4, .. })
        ));
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let s = FieldSchema::categorical(2).unwrap();
        let rows = read_rows("1\tb\tq\n0\ta\t\n1\tb\tr\n".as_bytes(), '\t', &s).unwrap();
        let v = build_vocab(&rows, &s, 1).unwrap();
        let mut buf = Vec::new();
        v.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "c0\tMISSING\t0\nc0\ta\t1\nc0\tb\t2\nc1\tMISSING\t0\nc1\tq\t1\nc1\tr\t2\n"
        );
        assert_eq!(Vocabulary::read_tsv(buf.as_slice()).unwrap(), v);
        assert!(Vocabulary::read_tsv("c0\tMISSING\t0\nc0\ta\t2\n".as_bytes()).is_err());
    }

    fn dataset(n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| EncodedInstance {
                    indices: vec![i as u32],
                    label: (i % 2) as u8,
                })
                .collect(),
        )
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = dataset(10);
        let (a, b) = split(&d, 0.9, 1).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));
        let (a, b) = split(&d, 0.7, 1).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(split(&d, 0.7, 1).unwrap().0, a);
        assert!(split(&d, 1.0, 1).is_err());
        assert!(split(&d, 0.0, 1).is_err());
    }

    #[test]
    fn batch_sizes() {
        let d = dataset(5);
        let sizes: Vec<usize> = batches(&d, 2, 0).unwrap().iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let d2 = dataset(2);
        assert_eq!(batches(&d2, 1000, 0).unwrap().len(), 1);
        assert!(batches(&d2, 0, 0).is_err());
    }

    #[test]
    fn planted_is_deterministic_and_validated() {
        let cfg = PlantedConfig::new(4, 2, 200, 5);
        let a = synthesize_planted(&cfg).unwrap();
        let b = synthesize_planted(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.schema.len(), 4);
        assert!(synthesize_planted(&PlantedConfig::new(2, 3, 10, 0)).is_err());
    }
}
