//! Text formats for impression datasets and vocabularies.
//!
//! Dataset files start with
//! `#adpm-dataset\tv1\trows=N\tkeys=listing:view,shop:favorite,...`
//! followed by one tab-separated row per impression:
//! `user  candidate  click  purchase  seq_1 ... seq_k`, where each sequence
//! is a comma-separated list of `id:timestamp` pairs, most recent first.
//!
//! Vocabulary files start with `K num_oov` and list `id\tfreq` in index
//! order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Dataset, Impression, SeqKey, TimedEntity, Vocabulary};
use crate::error::{Error, Result};

const DATASET_MAGIC: &str = "#adpm-dataset";

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    let keys: Vec<String> = data.keys.iter().map(ToString::to_string).collect();
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "{DATASET_MAGIC}\tv1\trows={}\tkeys={}",
        data.rows.len(),
        keys.join(",")
    )
    .map_err(io)?;
    for r in &data.rows {
        write!(
            w,
            "{}\t{}\t{}\t{}",
            r.user_id,
            r.candidate_id,
            u8::from(r.click),
            u8::from(r.purchase)
        )
        .map_err(io)?;
        for seq in &r.sequences {
            w.write_all(b"\t").map_err(io)?;
            for (i, e) in seq.iter().enumerate() {
                if i > 0 {
                    w.write_all(b",").map_err(io)?;
                }
                write!(w, "{}:{}", e.id, e.timestamp).map_err(io)?;
            }
        }
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn parse_flag(s: &str, path: &Path, line: usize, what: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(parse_err(
            path,
            line,
            format!("{what} must be 0 or 1, got `{s}`"),
        )),
    }
}

fn parse_sequence(s: &str, path: &Path, line: usize) -> Result<Vec<TimedEntity>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|item| {
            let (id, ts) = item.rsplit_once(':').ok_or_else(|| {
                parse_err(
                    path,
                    line,
                    format!("sequence item `{item}` is not id:timestamp"),
                )
            })?;
            let timestamp = ts
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad timestamp `{ts}`")))?;
            if id.is_empty() {
                return Err(parse_err(path, line, "empty entity id"));
            }
            Ok(TimedEntity {
                id: id.to_string(),
                timestamp,
            })
        })
        .collect()
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?
        .map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.len() != 4 || fields[0] != DATASET_MAGIC || fields[1] != "v1" {
        return Err(parse_err(path, 1, "not an adpm dataset v1 header"));
    }
    let rows: usize = fields[2]
        .strip_prefix("rows=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(path, 1, "bad rows= field"))?;
    let keys_field = fields[3]
        .strip_prefix("keys=")
        .ok_or_else(|| parse_err(path, 1, "bad keys= field"))?;
    let keys: Vec<SeqKey> = if keys_field.is_empty() {
        Vec::new()
    } else {
        keys_field
            .split(',')
            .map(|k| {
                k.parse()
                    .map_err(|e: Error| parse_err(path, 1, e.to_string()))
            })
            .collect::<Result<_>>()?
    };

    let mut out = Vec::with_capacity(rows);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 + keys.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, found {}", 4 + keys.len(), parts.len()),
            ));
        }
        let sequences = parts[4..]
            .iter()
            .map(|s| parse_sequence(s, path, lineno))
            .collect::<Result<_>>()?;
        out.push(Impression {
            user_id: parts[0].to_string(),
            candidate_id: parts[1].to_string(),
            click: parse_flag(parts[2], path, lineno, "click")?,
            purchase: parse_flag(parts[3], path, lineno, "purchase")?,
            sequences,
        });
    }
    if out.len() != rows {
        return Err(parse_err(
            path,
            out.len() + 2,
            format!("header declares {rows} rows, found {}", out.len()),
        ));
    }
    Ok(Dataset { keys, rows: out })
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{} {}", vocab.k(), vocab.num_oov()).map_err(io)?;
    for (id, freq) in vocab.entries() {
        writeln!(w, "{id}\t{freq}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let mut it = header.split_whitespace();
    let (k, num_oov) = match (it.next(), it.next(), it.next()) {
        (Some(k), Some(o), None) => (
            k.parse().map_err(|_| parse_err(path, 1, "bad K"))?,
            o.parse().map_err(|_| parse_err(path, 1, "bad num_oov"))?,
        ),
        _ => return Err(parse_err(path, 1, "header must be `K num_oov`")),
    };
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, freq) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i + 2, "expected id<TAB>freq"))?;
        let freq = freq
            .parse()
            .map_err(|_| parse_err(path, i + 2, format!("bad frequency `{freq}`")))?;
        entries.push((id.to_string(), freq));
    }
    Vocabulary::from_entries(entries, k, num_oov).map_err(|e| parse_err(path, 1, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequences::{build_vocab, Action, EntityKind};

    fn sample() -> Dataset {
        Dataset {
            keys: vec![
                SeqKey::new(EntityKind::Listing, Action::View),
                SeqKey::new(EntityKind::Shop, Action::Favorite),
            ],
            rows: vec![
                Impression {
                    user_id: "u1".into(),
                    candidate_id: "l9".into(),
                    click: true,
                    purchase: false,
                    sequences: vec![
                        vec![
                            TimedEntity {
                                id: "l2".into(),
                                timestamp: 50,
                            },
                            TimedEntity {
                                id: "l3".into(),
                                timestamp: 40,
                            },
                        ],
                        vec![],
                    ],
                },
                Impression {
                    user_id: "u2".into(),
                    candidate_id: "l1".into(),
                    click: false,
                    purchase: false,
                    sequences: vec![
                        vec![],
                        vec![TimedEntity {
                            id: "s4".into(),
                            timestamp: 7,
                        }],
                    ],
                },
            ],
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        let d = sample();
        write_dataset(&p, &d).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), d);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        fs::write(
            &p,
            "#adpm-dataset\tv1\trows=1\tkeys=listing:view\nu1\tl1\t2\t0\t\n",
        )
        .unwrap();
        match read_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocab_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        let v = build_vocab(["a", "b", "a", "c"], 2, 1).unwrap();
        write_vocab(&p, &v).unwrap();
        assert_eq!(read_vocab(&p).unwrap(), v);
    }
}
