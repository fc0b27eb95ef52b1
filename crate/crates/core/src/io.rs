//! Problem files, JSON output at 17 significant digits, and CSV artifacts.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::accpm::{AccpmConfig, Certificate};
use crate::dynamics::{ClosedLoop, ControllerSpec, PwaSystem, Rollout};
use crate::error::{Error, Result};
use crate::geometry::Polytope;
use crate::roa::ContourPoint;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub plant: PwaSystem,
    pub controller: ControllerSpec,
    pub roi0: Polytope,
    /// Input constraints for the invariant-set computation when the controller has none.
    #[serde(default)]
    pub input_set: Option<Polytope>,
    #[serde(default)]
    pub options: AccpmConfig,
}

fn default_schema() -> u32 {
    crate::accpm::SCHEMA_VERSION
}

impl ProblemSpec {
    pub fn closed_loop(&self) -> Result<ClosedLoop> {
        if self.roi0.dim() != self.plant.state_dim() {
            return Err(Error::Schema {
                path: "/roi0".into(),
                message: format!(
                    "region of interest has dimension {}, plant state has {}",
                    self.roi0.dim(),
                    self.plant.state_dim()
                ),
            });
        }
        ClosedLoop::new(self.plant.clone(), self.controller.clone())
    }

    /// `U` from the controller's projection set or the explicit `input_set`.
    pub fn input_constraints(&self) -> Option<&Polytope> {
        match &self.controller {
            ControllerSpec::ProjectedStateDependent { input_set, .. } | ControllerSpec::ProjectedInputOnly { input_set, .. } => {
                Some(input_set)
            }
            ControllerSpec::Raw { .. } => self.input_set.as_ref(),
        }
    }
}

/// Parses JSON, reporting failures with a JSON-pointer path to the offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let pointer = json_pointer(e.path());
        let inner = e.into_inner();
        Error::Schema {
            path: if pointer.is_empty() { "/".into() } else { pointer },
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| Error::Schema {
        path: "/".into(),
        message: e.to_string(),
    })?;
    Ok(value)
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

pub fn load_problem(path: &Path) -> Result<ProblemSpec> {
    let text = std::fs::read_to_string(path)?;
    let spec: ProblemSpec = parse_json(&text)?;
    if spec.schema_version != crate::accpm::SCHEMA_VERSION {
        return Err(Error::Schema {
            path: "/schema_version".into(),
            message: format!("unsupported schema version {}", spec.schema_version),
        });
    }
    Ok(spec)
}

/// `{:.16e}`: 17 significant digits, which round-trips every `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Pretty JSON whose floats are written with 17 significant digits.
struct Sig17<'a>(PrettyFormatter<'a>);

impl Formatter for Sig17<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)?)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// `iteration, p_star, x_star_1..n, time_s`.
pub fn write_history_csv(path: &Path, cert: &Certificate) -> Result<()> {
    let n = cert.a_cl.nrows();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string(), "p_star".to_string()];
    header.extend((1..=n).map(|i| format!("x_star_{i}")));
    header.push("time_s".into());
    w.write_record(&header)?;
    for r in &cert.iterations {
        let mut row = vec![r.iteration.to_string(), opt(r.p_star)];
        for i in 0..n {
            row.push(opt(r.x_star.as_ref().map(|x| x[i])));
        }
        row.push(fmt_f64(r.time_s));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `iteration, x_1..n, D_11, D_12, ..., c, slack_at_center` with `D` in row-major order.
pub fn write_cuts_csv(path: &Path, cert: &Certificate) -> Result<()> {
    let n = cert.a_cl.nrows();
    let d = cert.kind.param_dim(n);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("D_{i}_{j}"));
        }
    }
    header.push("c".into());
    header.push("slack_at_center".into());
    w.write_record(&header)?;
    for c in &cert.cuts {
        let mut row = vec![c.iteration.to_string()];
        row.extend(c.source.iter().map(|v| fmt_f64(*v)));
        for i in 0..d {
            for j in 0..d {
                row.push(fmt_f64(c.d[(i, j)]));
            }
        }
        row.push(fmt_f64(c.c));
        row.push(fmt_f64(c.slack_at_center));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `x1, x2, V, inside`.
pub fn write_contour_csv(path: &Path, pts: &[ContourPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x1", "x2", "V", "inside"])?;
    for p in pts {
        w.write_record([fmt_f64(p.x1), fmt_f64(p.x2), fmt_f64(p.v), (p.inside as u8).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `x1, x2` along the boundary.
pub fn write_boundary_csv(path: &Path, pts: &[[f64; 2]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x1", "x2"])?;
    for p in pts {
        w.write_record([fmt_f64(p[0]), fmt_f64(p[1])])?;
    }
    w.flush()?;
    Ok(())
}

/// `traj_id, k, x1, ..., xn`.
pub fn write_trajectories_csv(path: &Path, rollouts: &[Rollout]) -> Result<()> {
    let n = rollouts.iter().find_map(|r| r.states.first()).map_or(0, |x| x.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["traj_id".to_string(), "k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (id, r) in rollouts.iter().enumerate() {
        for (k, x) in r.states.iter().enumerate() {
            let mut row = vec![id.to_string(), k.to_string()];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.53352282] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        let s = to_json_string(&serde_json::json!({"a": [0.1, 2.0], "b": null})).unwrap();
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"][0].as_f64().unwrap(), 0.1);
        assert!(s.contains("1.0000000000000001e-1"));
    }

    #[test]
    fn schema_errors_carry_a_pointer() {
        let text = r#"{"plant": {"modes": [{"A": [[1.0]], "B": [[1.0]], "c": [0.0], "F": [[1.0],[-1.0]], "h": "x"}]}}"#;
        let err = parse_json::<ProblemSpec>(text).unwrap_err();
        let Error::Schema { path, .. } = err else { panic!("{err}") };
        assert_eq!(path, "/plant/modes/0/h");
    }
}
