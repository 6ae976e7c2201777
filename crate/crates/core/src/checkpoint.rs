//! Bit-exact model checkpoints.
//!
//! A checkpoint is a text file holding the run configuration that produced
//! the model plus every parameter matrix with entries written as hexadecimal
//! IEEE-754 bit patterns. The hex round trip preserves values exactly, so a
//! reloaded model reproduces the saved one bit for bit.

use std::io::{BufRead, Write};

use crate::augmentor::AugmentorParams;
use crate::config::{ConfigError, RunConfig};
use crate::encoder::EncoderParams;
use crate::tensor::DenseMatrix;
use crate::trainer::ModelParams;

const MAGIC: &str = "ibrec-checkpoint v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A trained model together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub params: ModelParams,
}

fn write_matrix(
    writer: &mut impl Write,
    name: &str,
    matrix: &DenseMatrix,
) -> Result<(), CheckpointError> {
    writeln!(writer, "matrix {name} {} {}", matrix.rows(), matrix.cols())?;
    for r in 0..matrix.rows() {
        let row: Vec<String> =
            matrix.row(r).iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        writeln!(writer, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn save(checkpoint: &Checkpoint, mut writer: impl Write) -> Result<(), CheckpointError> {
    let params = &checkpoint.params;
    writeln!(writer, "{MAGIC}")?;
    writeln!(writer, "users {}", params.n_users)?;
    writeln!(writer, "items {}", params.n_items)?;
    let config_text = checkpoint.run.serialize();
    writeln!(writer, "config-lines {}", config_text.lines().count())?;
    writer.write_all(config_text.as_bytes())?;
    write_matrix(&mut writer, "embeddings", &params.embeddings)?;
    for (l, layer) in params.encoder.weights.iter().enumerate() {
        for (h, w) in layer.iter().enumerate() {
            write_matrix(&mut writer, &format!("encoder.{l}.{h}"), w)?;
        }
    }
    write_matrix(&mut writer, "mlp.w1", &params.augmentor.w1)?;
    write_matrix(&mut writer, "mlp.w2", &params.augmentor.w2)?;
    writeln!(writer, "end")?;
    Ok(())
}

pub fn save_file(checkpoint: &Checkpoint, path: &std::path::Path) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    save(checkpoint, std::io::BufWriter::new(file))
}

struct Lines<R> {
    reader: R,
    number: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String, CheckpointError> {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line)?;
        if n == 0 {
            return Err(CheckpointError::Format(format!(
                "unexpected end of file after line {}",
                self.number
            )));
        }
        self.number += 1;
        while line.ends_with('\n') || line.ends_with('\r') {
            line.pop();
        }
        Ok(line)
    }

    fn fail(&self, detail: impl Into<String>) -> CheckpointError {
        CheckpointError::Format(format!("line {}: {}", self.number, detail.into()))
    }
}

fn read_matrix<R: BufRead>(
    lines: &mut Lines<R>,
    want_name: &str,
) -> Result<DenseMatrix, CheckpointError> {
    let header = lines.next()?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "matrix" || fields[1] != want_name {
        return Err(lines.fail(format!("expected matrix header for {want_name:?}, got {header:?}")));
    }
    let rows: usize =
        fields[2].parse().map_err(|_| lines.fail(format!("bad row count {:?}", fields[2])))?;
    let cols: usize =
        fields[3].parse().map_err(|_| lines.fail(format!("bad column count {:?}", fields[3])))?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = lines.next()?;
        let mut count = 0;
        for word in line.split_whitespace() {
            let bits = u64::from_str_radix(word, 16)
                .map_err(|_| lines.fail(format!("bad hex entry {word:?}")))?;
            data.push(f64::from_bits(bits));
            count += 1;
        }
        if count != cols {
            return Err(lines.fail(format!("expected {cols} entries, got {count}")));
        }
    }
    DenseMatrix::new(rows, cols, data).map_err(|e| lines.fail(e.to_string()))
}

pub fn load(reader: impl BufRead) -> Result<Checkpoint, CheckpointError> {
    let mut lines = Lines { reader, number: 0 };
    let magic = lines.next()?;
    if magic != MAGIC {
        return Err(lines.fail(format!("not a checkpoint (header {magic:?})")));
    }
    let parse_kv = |lines: &mut Lines<_>, key: &str| -> Result<usize, CheckpointError> {
        let line = lines.next()?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| lines.fail(format!("expected {key:?} line, got {line:?}")))?;
        rest.parse().map_err(|_| lines.fail(format!("bad {key} value {rest:?}")))
    };
    let n_users = parse_kv(&mut lines, "users")?;
    let n_items = parse_kv(&mut lines, "items")?;
    let config_lines = parse_kv(&mut lines, "config-lines")?;
    let mut config_text = String::new();
    for _ in 0..config_lines {
        config_text.push_str(&lines.next()?);
        config_text.push('\n');
    }
    let run = RunConfig::parse(&config_text)?;

    let embeddings = read_matrix(&mut lines, "embeddings")?;
    let encoder_config = run.train.encoder_config();
    let mut weights = Vec::with_capacity(encoder_config.layers);
    for l in 0..encoder_config.layers {
        let mut layer = Vec::with_capacity(encoder_config.hops.len());
        for h in 0..encoder_config.hops.len() {
            layer.push(read_matrix(&mut lines, &format!("encoder.{l}.{h}"))?);
        }
        weights.push(layer);
    }
    let w1 = read_matrix(&mut lines, "mlp.w1")?;
    let w2 = read_matrix(&mut lines, "mlp.w2")?;
    let terminator = lines.next()?;
    if terminator != "end" {
        return Err(lines.fail(format!("expected end marker, got {terminator:?}")));
    }

    let params = ModelParams {
        embeddings,
        encoder: EncoderParams { config: encoder_config, weights },
        augmentor: AugmentorParams {
            w1,
            w2,
            keep_prob: run.train.keep_prob,
            temperature: run.train.gumbel_temperature,
            threshold: run.train.threshold,
        },
        n_users,
        n_items,
    };
    Ok(Checkpoint { run, params })
}

pub fn load_file(path: &std::path::Path) -> Result<Checkpoint, CheckpointError> {
    let file = std::fs::File::open(path)?;
    load(std::io::BufReader::new(file))
}
