//! JSON-lines sequence files.
//!
//! One object per line: `{"id", "label", "subject", "frames"}` with frames
//! nested `[T][N][3]`. Written files also carry `source` and, for augmented
//! copies, `origin`. A coordinate given as `null` or as one of the strings
//! `"NaN"`, `"Infinity"`, `"-Infinity"` is rejected as non-finite.

use std::path::Path;

use serde_json::{json, Map, Value};

use super::{SkeletonSequence, Source, COORDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn field<'a>(obj: &'a Map<String, Value>, line: usize, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::Data(format!("line {line}: missing field `{name}`")))
}

fn coordinate(v: &Value, line: usize, t: usize, j: usize) -> Result<f64> {
    let non_finite = || {
        Error::Data(format!(
            "line {line}: field `frames`: non-finite coordinate at frame {t}, joint {j}"
        ))
    };
    match v {
        Value::Number(n) => n.as_f64().filter(|x| x.is_finite()).ok_or_else(non_finite),
        Value::Null => Err(non_finite()),
        Value::String(s)
            if matches!(
                s.as_str(),
                "NaN" | "nan" | "Infinity" | "-Infinity" | "inf" | "-inf"
            ) =>
        {
            Err(non_finite())
        }
        _ => Err(Error::Data(format!(
            "line {line}: field `frames`: coordinate at frame {t}, joint {j} is not a number"
        ))),
    }
}

fn parse_frames(v: &Value, line: usize) -> Result<Tensor> {
    let bad = |msg: &str| Error::Data(format!("line {line}: field `frames`: {msg}"));
    let frames = v
        .as_array()
        .ok_or_else(|| bad("expected an array of frames"))?;
    if frames.is_empty() {
        return Err(bad("needs at least one frame"));
    }
    let mut joints: Option<usize> = None;
    let mut data = Vec::new();
    for (t, frame) in frames.iter().enumerate() {
        let frame = frame
            .as_array()
            .ok_or_else(|| bad(&format!("frame {t} is not an array")))?;
        match joints {
            None if frame.is_empty() => return Err(bad("frames need at least one joint")),
            None => joints = Some(frame.len()),
            Some(n) if n != frame.len() => {
                return Err(bad(&format!(
                    "frame {t} has {} joints, expected {n}",
                    frame.len()
                )));
            }
            Some(_) => {}
        }
        for (j, joint) in frame.iter().enumerate() {
            let xyz = joint
                .as_array()
                .filter(|a| a.len() == COORDS)
                .ok_or_else(|| bad(&format!("frame {t}, joint {j} must be [x, y, z]")))?;
            for c in xyz {
                data.push(coordinate(c, line, t, j)?);
            }
        }
    }
    Tensor::new(vec![frames.len(), joints.unwrap_or(0), COORDS], data)
}

fn parse_record(text: &str, line: usize) -> Result<SkeletonSequence> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| Error::Data(format!("line {line}: malformed JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Data(format!("line {line}: expected a JSON object")))?;
    let string = |name: &str| -> Result<String> {
        field(obj, line, name)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Data(format!("line {line}: field `{name}` must be a string")))
    };
    let id = string("id")?;
    let subject = string("subject")?;
    let label = field(obj, line, "label")?.as_u64().ok_or_else(|| {
        Error::Data(format!(
            "line {line}: field `label` must be a nonnegative integer"
        ))
    })? as usize;
    let frames = parse_frames(field(obj, line, "frames")?, line)?;
    let source = match obj.get("source") {
        None => Source::Ingested,
        Some(v) => serde_json::from_value(v.clone()).map_err(|_| {
            Error::Data(format!("line {line}: field `source` is not a known source"))
        })?,
    };
    let origin = match obj.get("origin") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(Error::Data(format!(
                "line {line}: field `origin` must be a string"
            )))
        }
    };
    Ok(SkeletonSequence {
        id,
        label,
        subject,
        source,
        origin,
        frames,
    })
}

/// Parses JSON-lines text; blank lines are skipped.
pub fn parse_sequences(text: &str) -> Result<Vec<SkeletonSequence>> {
    let mut out: Vec<SkeletonSequence> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let seq = parse_record(raw, line)?;
        if let Some(first) = out.first() {
            if first.joint_count() != seq.joint_count() {
                return Err(Error::Data(format!(
                    "line {line}: schema error: {} joints, earlier records have {}",
                    seq.joint_count(),
                    first.joint_count()
                )));
            }
        }
        out.push(seq);
    }
    Ok(out)
}

pub fn load_sequences(path: impl AsRef<Path>) -> Result<Vec<SkeletonSequence>> {
    parse_sequences(&std::fs::read_to_string(path)?)
}

pub fn write_sequences(path: impl AsRef<Path>, seqs: &[SkeletonSequence]) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        let (t, n) = (s.frame_count(), s.joint_count());
        let frames: Vec<Vec<&[f64]>> = (0..t)
            .map(|ti| {
                (0..n)
                    .map(|j| &s.frames.data()[(ti * n + j) * COORDS..][..COORDS])
                    .collect()
            })
            .collect();
        let mut rec = json!({
            "id": s.id,
            "label": s.label,
            "subject": s.subject,
            "source": s.source,
            "frames": frames,
        });
        if let Some(o) = &s.origin {
            rec["origin"] = json!(o);
        }
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{"id":"a","label":1,"subject":"s1","frames":[[[0,0,1],[1,0,1]],[[0,0,1],[1,0,1]],[[0,0,1],[1,0,1]],[[0,0,1],[1,0,2]]]}"#;

    #[test]
    fn empty_text_is_empty_dataset() {
        assert!(parse_sequences("").unwrap().is_empty());
    }

    #[test]
    fn one_record() {
        let d = parse_sequences(ONE).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].frames.shape(), &[4, 2, 3]);
        assert_eq!(d[0].source, Source::Ingested);
        assert_eq!(d[0].frames.at(&[3, 1, 2]), 2.0);
    }

    #[test]
    fn nan_string_names_frame_and_joint() {
        let bad = ONE.replace("[1,0,2]", r#"[1,"NaN",2]"#);
        let err = parse_sequences(&bad).unwrap_err().to_string();
        assert!(
            err.contains("line 1") && err.contains("frame 3, joint 1"),
            "{err}"
        );
        let null = ONE.replace("[0,0,1],[1,0,1]],[[0,0,1]", "[0,0,1],[1,0,null]],[[0,0,1]");
        assert!(parse_sequences(&null)
            .unwrap_err()
            .to_string()
            .contains("non-finite"));
    }

    #[test]
    fn missing_field_names_line_and_field() {
        let text = format!("{ONE}\n{}", ONE.replace(r#""subject":"s1","#, ""));
        let err = parse_sequences(&text).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("`subject`"), "{err}");
    }

    #[test]
    fn inconsistent_joint_counts_are_a_schema_error() {
        let other = r#"{"id":"b","label":0,"subject":"s2","frames":[[[0,0,1]]]}"#;
        let err = parse_sequences(&format!("{ONE}\n{other}"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("schema"), "{err}");
    }
}
