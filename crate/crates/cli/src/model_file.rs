//! Model file: a versioned header line carrying the model spec as JSON, then
//! one weight per line in shortest round-trip decimal form.

use std::io::{BufRead, Write};

use fedxfer::{Error, ModelSpec, Result, WeightVector};

pub const MODEL_HEADER: &str = "fedxfer-model v1";

pub fn write_model<W: Write>(mut out: W, spec: &ModelSpec, w: &WeightVector) -> Result<()> {
    let spec_json = serde_json::to_string(spec).map_err(|e| Error::Internal(e.to_string()))?;
    writeln!(out, "{MODEL_HEADER} {spec_json}")?;
    for x in w.iter() {
        writeln!(out, "{x:?}")?;
    }
    Ok(())
}

pub fn read_model<R: BufRead>(input: R) -> Result<(ModelSpec, WeightVector)> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let spec_json = header.strip_prefix(MODEL_HEADER).ok_or_else(|| Error::Parse {
        line: 1,
        message: format!("expected header starting with {MODEL_HEADER:?}"),
    })?;
    let spec: ModelSpec = serde_json::from_str(spec_json.trim()).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    spec.validate()?;
    let mut weights = Vec::with_capacity(spec.total_dim());
    for (i, line) in lines.enumerate() {
        let line = line?;
        let no = i as u64 + 2;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let x: f64 = t.parse().map_err(|_| Error::Parse {
            line: no,
            message: format!("not a number: {t:?}"),
        })?;
        if !x.is_finite() {
            return Err(Error::Parse {
                line: no,
                message: "non-finite weight".into(),
            });
        }
        weights.push(x);
    }
    if weights.len() != spec.total_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.total_dim(),
            actual: weights.len(),
            context: "model file weights",
        });
    }
    Ok((spec, WeightVector::new(weights)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedxfer::models::{init_weights, Activation};

    #[test]
    fn round_trip_is_exact() {
        let spec = ModelSpec::mlp(3, vec![4], 2, Activation::Relu);
        let w = init_weights(&spec, 5, 0.7);
        let mut buf = Vec::new();
        write_model(&mut buf, &spec, &w).unwrap();
        let (s2, w2) = read_model(buf.as_slice()).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(w2, w);
    }

    #[test]
    fn bad_line_reports_number() {
        let spec = ModelSpec::logistic(1, 2);
        let mut buf = Vec::new();
        write_model(&mut buf, &spec, &WeightVector::zeros(4)).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("0.0\n0.0", "0.0\nabc", 1);
        match read_model(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
