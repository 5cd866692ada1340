//! Plain-text feature cache: per utterance a header line
//! `utt <id> <speaker> <T> 40` followed by `T` lines of 40 floats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, FeatureSequence, Role, N_MELS};
use crate::error::{Error, Result};

pub fn write_cache<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    for utt in data.utterances() {
        let (t, d) = utt.frames.dim();
        writeln!(w, "utt {} {} {} {}", utt.utterance_id, utt.speaker_label, t, d)?;
        for row in utt.frames.rows() {
            let mut first = true;
            for v in row {
                if !first {
                    w.write_all(b" ")?;
                }
                first = false;
                // `{}` on f64 is shortest round-trip, so reads are bit-exact.
                write!(w, "{v}")?;
            }
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_cache_file(data: &Dataset, path: &Path) -> Result<()> {
    write_cache(data, BufWriter::new(File::create(path)?))
}

fn cache_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Cache { line, msg: msg.into() }
}

pub fn read_cache<R: Read>(r: R, role: Role) -> Result<Dataset> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let mut utts = Vec::new();
    while let Some((n, line)) = lines.next() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 5 || parts[0] != "utt" {
            return Err(cache_err(n + 1, "expected `utt <id> <speaker> <T> 40`"));
        }
        let t: usize = parts[3].parse().map_err(|_| cache_err(n + 1, "bad frame count"))?;
        if parts[4] != N_MELS.to_string() {
            return Err(cache_err(n + 1, format!("feature dim {} != {N_MELS}", parts[4])));
        }
        if t == 0 {
            return Err(cache_err(n + 1, "zero frames"));
        }
        let mut frames = Array2::zeros((t, N_MELS));
        for mut row in frames.rows_mut() {
            let (m, line) = lines.next().ok_or_else(|| cache_err(n + 1, "truncated utterance"))?;
            let line = line?;
            let mut count = 0;
            for (x, tok) in row.iter_mut().zip(line.split(' ')) {
                *x = tok.parse::<f64>().map_err(|_| cache_err(m + 1, format!("bad float {tok:?}")))?;
                if !x.is_finite() {
                    return Err(cache_err(m + 1, "non-finite value"));
                }
                count += 1;
            }
            if count != N_MELS || line.split(' ').count() != N_MELS {
                return Err(cache_err(m + 1, "expected 40 values"));
            }
        }
        utts.push(FeatureSequence::new(frames, parts[2], parts[1]));
    }
    Ok(Dataset::from_utterances(role, utts))
}

pub fn read_cache_file(path: &Path, role: Role) -> Result<Dataset> {
    read_cache(File::open(path)?, role)
}
