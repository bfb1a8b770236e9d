//! Reader and writer for the `.ts` time series text format.
//!
//! A header of `@`-directives precedes `@data`. Each data line holds one
//! case: per-dimension comma-separated values separated by `:`, the last
//! field being the class label. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::Path;

use super::{Bag, DatasetMeta};
use crate::error::{Error, Result};

fn parse_bool(s: &str, line: usize) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse {
            line,
            msg: format!("expected true/false, got '{s}'"),
        }),
    }
}

fn parse_usize(s: Option<&str>, line: usize, what: &str) -> Result<usize> {
    s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
        line,
        msg: format!("{what} needs a non-negative integer"),
    })
}

pub fn parse_ts(path: impl AsRef<Path>) -> Result<(DatasetMeta, Vec<Bag>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ts_str(&text)
}

pub fn parse_ts_str(text: &str) -> Result<(DatasetMeta, Vec<Bag>)> {
    let mut name = String::from("dataset");
    let mut dims: Option<usize> = None;
    let mut equal_length: Option<bool> = None;
    let mut declared_length: Option<usize> = None;
    let mut labels: Option<Vec<String>> = None;
    let mut in_data = false;
    // (line number, per-dimension series, label index)
    let mut cases: Vec<(usize, Vec<Vec<f64>>, usize)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let Some(directive) = line.strip_prefix('@') else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "data line before @data".into(),
                });
            };
            let mut parts = directive.split_whitespace();
            let key = parts.next().unwrap_or("").to_ascii_lowercase();
            match key.as_str() {
                "problemname" => name = parts.collect::<Vec<_>>().join(" "),
                "timestamps" => {
                    if parse_bool(parts.next().unwrap_or(""), line_no)? {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: "time-stamped series are not supported".into(),
                        });
                    }
                }
                "missing" | "univariate" | "targetlabel" => {}
                "dimensions" => dims = Some(parse_usize(parts.next(), line_no, "@dimensions")?),
                "equallength" => equal_length = Some(parse_bool(parts.next().unwrap_or(""), line_no)?),
                "serieslength" => declared_length = Some(parse_usize(parts.next(), line_no, "@seriesLength")?),
                "classlabel" => {
                    if !parse_bool(parts.next().unwrap_or(""), line_no)? {
                        return Err(Error::Schema("datasets without class labels are not supported".into()));
                    }
                    let ls: Vec<String> = parts.map(str::to_string).collect();
                    if ls.is_empty() {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: "@classLabel true lists no labels".into(),
                        });
                    }
                    labels = Some(ls);
                }
                "data" => in_data = true,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unsupported directive '@{other}'"),
                    })
                }
            }
            continue;
        }

        let fields: Vec<&str> = line.split(':').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected at least one dimension and a class label".into(),
            });
        }
        let (series_fields, label) = fields.split_at(fields.len() - 1);
        let label = label[0].trim();
        let n_dims = *dims.get_or_insert(series_fields.len());
        if series_fields.len() != n_dims {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {n_dims} dimensions, found {}", series_fields.len()),
            });
        }
        let class_list = labels
            .as_ref()
            .ok_or_else(|| Error::Schema("@classLabel directive missing".into()))?;
        let label_idx = class_list
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Schema(format!("line {line_no}: label '{label}' not in {class_list:?}")))?;
        let mut series = Vec::with_capacity(n_dims);
        for (dim, f) in series_fields.iter().enumerate() {
            let vals: Vec<f64> = f
                .split(',')
                .map(|v| {
                    let v = v.trim();
                    v.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("dimension {dim}: cannot parse '{v}' as a number"),
                    })
                })
                .collect::<Result<_>>()?;
            if let Some(pos) = vals.iter().position(|v| !v.is_finite()) {
                return Err(Error::Schema(format!(
                    "line {line_no}: non-finite value in dimension {dim} at position {pos}"
                )));
            }
            series.push(vals);
        }
        cases.push((line_no, series, label_idx));
    }

    let class_labels = labels.ok_or_else(|| Error::Schema("@classLabel directive missing".into()))?;
    if !in_data || cases.is_empty() {
        return Err(Error::Schema("empty data section".into()));
    }
    let d = dims.unwrap_or(1);
    let lengths: Vec<usize> = cases
        .iter()
        .map(|(_, s, _)| s.iter().map(Vec::len).max().unwrap_or(0))
        .collect();
    let max_len = *lengths.iter().max().expect("non-empty");
    let ragged = cases
        .iter()
        .any(|(_, s, _)| s.iter().any(|dim| dim.len() != max_len));
    if ragged && equal_length == Some(true) {
        let (line, _, _) = cases
            .iter()
            .find(|(_, s, _)| s.iter().any(|dim| dim.len() != max_len))
            .expect("ragged case exists");
        return Err(Error::Parse {
            line: *line,
            msg: "series length differs although @equalLength is true".into(),
        });
    }
    if let (Some(n), false) = (declared_length, ragged) {
        if n != max_len && equal_length != Some(false) {
            return Err(Error::Schema(format!("@seriesLength {n} but series have length {max_len}")));
        }
    }

    let mut bags = Vec::with_capacity(cases.len());
    for (k, ((_, series, label), &len)) in cases.iter().zip(&lengths).enumerate() {
        let mut values = vec![0.0; max_len * d];
        for (c, dim) in series.iter().enumerate() {
            for (t, &v) in dim.iter().enumerate() {
                values[t * d + c] = v;
            }
        }
        let mut bag = Bag::new(format!("{name}-{k}"), values, max_len, d, *label)?;
        bag.valid_len = len;
        bags.push(bag);
    }
    let meta = DatasetMeta {
        name,
        dimensions: d,
        series_length: (!ragged).then_some(max_len),
        max_length: max_len,
        class_labels,
        num_bags: bags.len(),
    };
    meta.validate(&bags)?;
    Ok((meta, bags))
}

/// Writes bags in `.ts` format; padding is stripped from each case.
pub fn write_ts(path: impl AsRef<Path>, meta: &DatasetMeta, bags: &[Bag]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let equal = bags.iter().all(|b| b.valid_len == bags.first().map_or(0, |f| f.valid_len));
    let _ = writeln!(out, "@problemName {}", meta.name);
    let _ = writeln!(out, "@timeStamps false");
    let _ = writeln!(out, "@missing false");
    let _ = writeln!(out, "@univariate {}", meta.dimensions == 1);
    let _ = writeln!(out, "@dimensions {}", meta.dimensions);
    let _ = writeln!(out, "@equalLength {equal}");
    if let (true, Some(b)) = (equal, bags.first()) {
        let _ = writeln!(out, "@seriesLength {}", b.valid_len);
    }
    let _ = writeln!(out, "@classLabel true {}", meta.class_labels.join(" "));
    let _ = writeln!(out, "@data");
    for b in bags {
        if b.d != meta.dimensions {
            return Err(Error::dim(format!("bag {} has {} channels, header says {}", b.id, b.d, meta.dimensions)));
        }
        let label = meta
            .class_labels
            .get(b.label)
            .ok_or_else(|| Error::Schema(format!("bag {} label {} has no name", b.id, b.label)))?;
        for c in 0..b.d {
            for t in 0..b.valid_len {
                if t > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", b.value(t, c));
            }
            out.push(':');
        }
        out.push_str(label);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
