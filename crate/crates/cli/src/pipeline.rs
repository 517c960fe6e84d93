//! Raw rows to encoded splits, as configured.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use gatectr::data::{
    build_vocab, encode_rows, read_rows, split_indices, synthesize_planted, Field, FieldKind, FieldSchema,
    PlantedConfig, RawRow, Vocabulary,
};
use gatectr::model::{FieldDim, ModelSpec};
use gatectr::train::Splits;

use crate::config::{DataConfig, DataSource, RunConfig};
use crate::error::CliError;

/// Rows after splitting, before encoding.
#[derive(Debug, Clone)]
pub struct RawSplits {
    pub schema: FieldSchema,
    pub train: Vec<RawRow>,
    pub test: Vec<RawRow>,
    pub valid: Vec<RawRow>,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub schema: FieldSchema,
    pub vocab: Vocabulary,
    pub splits: Splits,
}

pub fn schema_of(data: &DataConfig) -> Result<FieldSchema, CliError> {
    match data.source {
        DataSource::Planted => Ok(FieldSchema::categorical(data.planted_fields)?),
        DataSource::File => {
            let fields = data
                .fields
                .iter()
                .map(|name| Field {
                    name: name.clone(),
                    kind: if data.continuous.contains(name) {
                        FieldKind::Continuous
                    } else {
                        FieldKind::Categorical
                    },
                })
                .collect();
            Ok(FieldSchema::new(fields)?)
        }
    }
}

pub fn read_file(path: &Path, delimiter: char, schema: &FieldSchema) -> Result<Vec<RawRow>, CliError> {
    let f = File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    read_rows(BufReader::new(f), delimiter, schema).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn pick(rows: &[RawRow], ix: &[usize]) -> Vec<RawRow> {
    ix.iter().map(|&i| rows[i].clone()).collect()
}

/// Loads or generates the rows and splits them. Without an explicit test
/// file a `test_fraction` share is held out; a `valid_fraction` share of the
/// remainder is held out for early stopping.
pub fn raw_splits(data: &DataConfig, seed: u64) -> Result<RawSplits, CliError> {
    let seed = data.seed.unwrap_or(seed);
    let schema = schema_of(data)?;
    let (pool, test) = match data.source {
        DataSource::Planted => {
            let cfg = PlantedConfig {
                fields: data.planted_fields,
                signal_fields: data.planted_signal_fields,
                rows: data.planted_rows,
                cardinality: data.planted_cardinality,
                strength: data.planted_strength,
                seed,
            };
            (synthesize_planted(&cfg)?.rows, None)
        }
        DataSource::File => {
            let train_path = data
                .train
                .as_deref()
                .ok_or_else(|| CliError::Config(vec!["data.train is required".into()]))?;
            let pool = read_file(train_path, data.delimiter, &schema)?;
            let test = match &data.test {
                Some(p) => Some(read_file(p, data.delimiter, &schema)?),
                None => None,
            };
            (pool, test)
        }
    };
    let (pool, test) = match test {
        Some(t) => (pool, t),
        None => {
            let (a, b) = split_indices(pool.len(), 1.0 - data.test_fraction, seed)?;
            (pick(&pool, &a), pick(&pool, &b))
        }
    };
    let (train, valid) = if data.valid_fraction > 0.0 {
        let (a, b) = split_indices(pool.len(), 1.0 - data.valid_fraction, seed ^ 0x7661_6c69_64)?;
        (pick(&pool, &a), pick(&pool, &b))
    } else {
        (pool, Vec::new())
    };
    if train.is_empty() {
        return Err(CliError::data("training split is empty"));
    }
    if test.is_empty() {
        return Err(CliError::data("test split is empty"));
    }
    Ok(RawSplits {
        schema,
        train,
        test,
        valid,
    })
}

/// Builds the vocabulary on the training rows only and encodes every split.
pub fn prepare(data: &DataConfig, seed: u64) -> Result<Prepared, CliError> {
    let raw = raw_splits(data, seed)?;
    let vocab = build_vocab(&raw.train, &raw.schema, data.min_count)?;
    let splits = Splits {
        train: encode_rows(&raw.train, &raw.schema, &vocab)?,
        test: encode_rows(&raw.test, &raw.schema, &vocab)?,
        valid: if raw.valid.is_empty() {
            None
        } else {
            Some(encode_rows(&raw.valid, &raw.schema, &vocab)?)
        },
    };
    Ok(Prepared {
        schema: raw.schema,
        vocab,
        splits,
    })
}

pub fn field_dims(vocab: &Vocabulary) -> Vec<FieldDim> {
    vocab
        .field_names()
        .into_iter()
        .zip(vocab.cardinalities())
        .map(|(name, cardinality)| FieldDim {
            name: name.to_string(),
            cardinality,
        })
        .collect()
}

pub fn model_spec(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelSpec, CliError> {
    let spec = cfg.model.spec(field_dims(vocab));
    spec.validate()?;
    Ok(spec)
}

/// Refuses a checkpoint whose fields differ from the schema and vocabulary
/// the data will be encoded with.
pub fn check_schema(spec: &ModelSpec, schema: &FieldSchema, vocab: &Vocabulary) -> Result<(), CliError> {
    let mut problems = Vec::new();
    let ck: Vec<&str> = spec.fields.iter().map(|f| f.name.as_str()).collect();
    let names = schema.names();
    if ck != names {
        problems.push(format!("checkpoint fields {ck:?} but data schema has {names:?}"));
    }
    let vnames = vocab.field_names();
    if ck != vnames {
        problems.push(format!("checkpoint fields {ck:?} but vocabulary has {vnames:?}"));
    } else {
        for (f, c) in spec.fields.iter().zip(vocab.cardinalities()) {
            if f.cardinality != c {
                problems.push(format!(
                    "field '{}': checkpoint cardinality {} but vocabulary has {c}",
                    f.name, f.cardinality
                ));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::data(format!("schema mismatch, refusing to evaluate:\n  {}", problems.join("\n  "))))
    }
}
