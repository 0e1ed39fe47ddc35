//! Dataset ingestion (generator CSVs and C-MAPSS-layout text files), model
//! persistence as versioned JSON, and atomic file writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cox::{BaselineHazardCurve, CoxParams};
use crate::datagen::UnitRecord;
use crate::error::{Error, Result};
use crate::inference::{DataSummary, FittedModel, ModelParams};
use crate::kernels::KernelParams;
use crate::sparse_gp::VariationalPosterior;
use crate::spline::SmoothingSpline;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Recorded z-score transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

/// A loaded collection of units plus provenance and any standardization that
/// was applied to the signal channel.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub units: Vec<UnitRecord>,
    pub provenance: String,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for u in &self.units {
            u.validate()?;
            if !seen.insert(u.id) {
                return Err(Error::InvalidInput(format!("duplicate unit id {}", u.id)));
            }
        }
        Ok(())
    }

    /// Apply a pooled z-score to all signal values and record it.
    pub fn standardize(&mut self) {
        let (mean, sd) = crate::evaluation::standardize_in_place(&mut self.units);
        self.standardization = Some(Standardization { mean, sd });
    }
}

/// Write bytes through a temp file in the same directory and rename into
/// place, so interrupted runs never leave partial files behind.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let display = path.display().to_string();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {display}")))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp~");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(display, e))?;
    Ok(())
}

/// Serialize a dataset to the two-file CSV layout: `unit_id,time,value` and
/// `unit_id,event_time,event_indicator,w0[,w1,...]`.
pub fn write_dataset_csvs(
    units: &[UnitRecord],
    longitudinal_path: &Path,
    survival_path: &Path,
) -> Result<()> {
    let mut long = String::from("unit_id,time,value\n");
    for u in units {
        for (t, v) in u.times.iter().zip(&u.values) {
            long.push_str(&format!("{},{},{}\n", u.id, t, v));
        }
    }
    atomic_write(longitudinal_path, long.as_bytes())?;

    let n_cov = units.first().map_or(0, |u| u.covariates.len());
    let mut surv = String::from("unit_id,event_time,event_indicator");
    for j in 0..n_cov {
        surv.push_str(&format!(",w{j}"));
    }
    surv.push('\n');
    for u in units {
        surv.push_str(&format!(
            "{},{},{}",
            u.id,
            u.event_time,
            if u.event_observed { 1 } else { 0 }
        ));
        for w in &u.covariates {
            surv.push_str(&format!(",{w}"));
        }
        surv.push('\n');
    }
    atomic_write(survival_path, surv.as_bytes())
}

fn parse_field<T: std::str::FromStr>(
    raw: &str,
    path: &str,
    line: u64,
    column: &str,
) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Schema {
        path: path.into(),
        line,
        message: format!("cannot parse {column} from {raw:?}"),
    })
}

/// Load a dataset from the two-file CSV layout, validating monotone times and
/// matching unit ids across the files.
pub fn ingest_longitudinal_csv(
    longitudinal_path: &Path,
    survival_path: &Path,
) -> Result<Dataset> {
    let long_name = longitudinal_path.display().to_string();
    let surv_name = survival_path.display().to_string();

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(longitudinal_path)
        .map_err(|e| Error::Schema {
            path: long_name.clone(),
            line: 0,
            message: e.to_string(),
        })?;
    {
        let headers = rdr.headers().map_err(|e| Error::Schema {
            path: long_name.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        let expect = ["unit_id", "time", "value"];
        if headers.iter().map(str::trim).ne(expect) {
            return Err(Error::Schema {
                path: long_name,
                line: 1,
                message: format!("expected header unit_id,time,value, got {headers:?}"),
            });
        }
    }
    // id -> (times, values, last line)
    let mut series: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Schema {
            path: long_name.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::Schema {
                path: long_name,
                line,
                message: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let id: usize = parse_field(&record[0], &long_name, line, "unit_id")?;
        let t: f64 = parse_field(&record[1], &long_name, line, "time")?;
        let v: f64 = parse_field(&record[2], &long_name, line, "value")?;
        let entry = series.entry(id).or_default();
        if let Some(&last) = entry.0.last() {
            if t <= last {
                return Err(Error::Schema {
                    path: long_name,
                    line,
                    message: format!("unit {id}: time {t} not after previous {last}"),
                });
            }
        }
        entry.0.push(t);
        entry.1.push(v);
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(survival_path)
        .map_err(|e| Error::Schema {
            path: surv_name.clone(),
            line: 0,
            message: e.to_string(),
        })?;
    {
        let headers = rdr.headers().map_err(|e| Error::Schema {
            path: surv_name.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        let fields: Vec<&str> = headers.iter().map(str::trim).collect();
        let ok = fields.len() >= 3
            && fields[0] == "unit_id"
            && fields[1] == "event_time"
            && fields[2] == "event_indicator"
            && fields[3..].iter().enumerate().all(|(j, f)| *f == format!("w{j}"));
        if !ok {
            return Err(Error::Schema {
                path: surv_name,
                line: 1,
                message: format!(
                    "expected header unit_id,event_time,event_indicator[,w0,...], got {headers:?}"
                ),
            });
        }
    }
    let mut survival: BTreeMap<usize, (f64, bool, Vec<f64>)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Schema {
            path: surv_name.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let id: usize = parse_field(&record[0], &surv_name, line, "unit_id")?;
        let v: f64 = parse_field(&record[1], &surv_name, line, "event_time")?;
        let delta: u8 = parse_field(&record[2], &surv_name, line, "event_indicator")?;
        if delta > 1 {
            return Err(Error::Schema {
                path: surv_name,
                line,
                message: format!("event_indicator must be 0 or 1, got {delta}"),
            });
        }
        let mut w = Vec::with_capacity(record.len().saturating_sub(3));
        for j in 3..record.len() {
            w.push(parse_field::<f64>(&record[j], &surv_name, line, &format!("w{}", j - 3))?);
        }
        if survival.insert(id, (v, delta == 1, w)).is_some() {
            return Err(Error::Schema {
                path: surv_name,
                line,
                message: format!("duplicate survival row for unit {id}"),
            });
        }
    }

    for id in series.keys() {
        if !survival.contains_key(id) {
            return Err(Error::InvalidInput(format!(
                "unit {id} has longitudinal data but no survival row"
            )));
        }
    }
    let mut units = Vec::with_capacity(survival.len());
    for (id, (event_time, event_observed, covariates)) in survival {
        let (times, values) = series.remove(&id).unwrap_or_default();
        let unit = UnitRecord { id, times, values, event_time, event_observed, covariates };
        unit.validate()?;
        units.push(unit);
    }
    let ds = Dataset {
        units,
        provenance: format!("csv:{long_name}"),
        standardization: None,
    };
    ds.validate()?;
    Ok(ds)
}

const CMAPSS_COLUMNS: usize = 26;

/// Load a C-MAPSS-layout whitespace-delimited file: unit id, cycle, three
/// operational settings, 21 sensor channels. The chosen sensor becomes the
/// longitudinal signal, z-scored over the ingested units; every unit is
/// run-to-failure (its last cycle is its event time).
pub fn ingest_cmapss(
    path: &Path,
    sensor_column: &str,
    unit_limit: Option<usize>,
) -> Result<Dataset> {
    let name = path.display().to_string();
    let valid: Vec<String> = (1..=21).map(|k| format!("s{k}")).collect();
    let sensor_idx = valid
        .iter()
        .position(|s| s == sensor_column)
        .map(|k| 5 + k)
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "unknown sensor column {sensor_column:?}; valid names: {}",
                valid.join(",")
            ))
        })?;

    let contents = fs::read_to_string(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut order: Vec<usize> = Vec::new();
    let mut series: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (idx, raw_line) in contents.lines().enumerate() {
        let line = idx as u64 + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw_line.split_whitespace().collect();
        if fields.len() != CMAPSS_COLUMNS {
            return Err(Error::Schema {
                path: name,
                line,
                message: format!("expected {CMAPSS_COLUMNS} columns, got {}", fields.len()),
            });
        }
        let unit: usize = parse_field(fields[0], &name, line, "unit")?;
        let cycle: f64 = parse_field(fields[1], &name, line, "cycle")?;
        let value: f64 = parse_field(fields[sensor_idx], &name, line, sensor_column)?;
        if !series.contains_key(&unit) {
            if let Some(limit) = unit_limit {
                if order.len() == limit {
                    continue;
                }
            }
            order.push(unit);
        }
        let entry = series.entry(unit).or_default();
        if let Some(&last) = entry.0.last() {
            if cycle <= last {
                return Err(Error::Schema {
                    path: name,
                    line,
                    message: format!("unit {unit}: cycle {cycle} not after previous {last}"),
                });
            }
        }
        entry.0.push(cycle);
        entry.1.push(value);
    }
    if series.is_empty() {
        return Err(Error::InvalidInput(format!("{name}: no data rows")));
    }

    let mut units: Vec<UnitRecord> = order
        .into_iter()
        .map(|id| {
            let (times, values) = series.remove(&id).unwrap();
            let event_time = *times.last().unwrap();
            UnitRecord {
                id,
                times,
                values,
                event_time,
                event_observed: true,
                covariates: Vec::new(),
            }
        })
        .collect();
    let (mean, sd) = crate::evaluation::standardize_in_place(&mut units);
    let ds = Dataset {
        units,
        provenance: format!("cmapss:{name}:{sensor_column}"),
        standardization: Some(Standardization { mean, sd }),
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl MatrixJson {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatrixJson { rows: m.nrows(), cols: m.ncols(), data }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::InvalidInput(format!(
                "matrix payload has {} entries for {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_fn(self.rows, self.cols, |r, c| {
            self.data[r * self.cols + c]
        }))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    schema_version: u32,
    num_units: usize,
    num_latent: usize,
    lengthscales: Vec<f64>,
    kernel_widths: MatrixJson,
    kernel_scales: MatrixJson,
    noise_sd: f64,
    covariate_coefs: Vec<f64>,
    signal_coef: f64,
    baseline_log_level: f64,
    baseline_slope: f64,
    first_event_time: f64,
    pseudo_inputs: Vec<f64>,
    posterior_mean: Vec<f64>,
    posterior_cov: MatrixJson,
    posterior_jitter: f64,
    baseline_grid: Vec<f64>,
    baseline_cum_hazard: Vec<f64>,
    baseline_spline_knots: Vec<f64>,
    baseline_spline_coefficients: Vec<f64>,
    elbo_trace: Vec<f64>,
    unit_ids: Vec<usize>,
    num_obs: usize,
    time_range: [f64; 2],
    standardization: Option<[f64; 2]>,
    converged: bool,
}

/// Persist a fitted model as versioned JSON (atomic write).
pub fn save_model(model: &FittedModel, path: &Path) -> Result<()> {
    let json = ModelJson {
        schema_version: MODEL_SCHEMA_VERSION,
        num_units: model.params.kernel.num_units,
        num_latent: model.params.kernel.num_latent,
        lengthscales: model.params.kernel.lengthscales.clone(),
        kernel_widths: MatrixJson::from_matrix(&model.params.kernel.kernel_widths),
        kernel_scales: MatrixJson::from_matrix(&model.params.kernel.kernel_scales),
        noise_sd: model.params.kernel.noise_sd,
        covariate_coefs: model.params.cox.covariate_coefs.clone(),
        signal_coef: model.params.cox.signal_coef,
        baseline_log_level: model.params.cox.baseline_log_level,
        baseline_slope: model.params.cox.baseline_slope,
        first_event_time: model.params.cox.first_event_time,
        pseudo_inputs: model.posterior.pseudo_inputs.clone(),
        posterior_mean: model.posterior.mean.iter().copied().collect(),
        posterior_cov: MatrixJson::from_matrix(&model.posterior.cov),
        posterior_jitter: model.posterior.jitter,
        baseline_grid: model.baseline.grid.clone(),
        baseline_cum_hazard: model.baseline.cum_hazard.clone(),
        baseline_spline_knots: model.baseline.spline().knots().to_vec(),
        baseline_spline_coefficients: model.baseline.spline().coefficients().to_vec(),
        elbo_trace: model.elbo_trace.clone(),
        unit_ids: model.data_summary.unit_ids.clone(),
        num_obs: model.data_summary.num_obs,
        time_range: [model.data_summary.time_range.0, model.data_summary.time_range.1],
        standardization: model.data_summary.standardization.map(|(m, s)| [m, s]),
        converged: model.converged,
    };
    let body = serde_json::to_string_pretty(&json)?;
    atomic_write(path, body.as_bytes())
}

/// Load a model saved by [`save_model`]; the schema version and all type
/// invariants are validated.
pub fn load_model(path: &Path) -> Result<FittedModel> {
    let name = path.display().to_string();
    let body = fs::read_to_string(path).map_err(|e| Error::io(name, e))?;
    let json: ModelJson = serde_json::from_str(&body)?;
    if json.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            expected: MODEL_SCHEMA_VERSION,
            found: json.schema_version,
        });
    }
    let kernel = KernelParams {
        num_units: json.num_units,
        num_latent: json.num_latent,
        lengthscales: json.lengthscales,
        kernel_widths: json.kernel_widths.to_matrix()?,
        kernel_scales: json.kernel_scales.to_matrix()?,
        noise_sd: json.noise_sd,
    };
    let cox = CoxParams {
        covariate_coefs: json.covariate_coefs,
        signal_coef: json.signal_coef,
        baseline_log_level: json.baseline_log_level,
        baseline_slope: json.baseline_slope,
        first_event_time: json.first_event_time,
    };
    let params = ModelParams { kernel, cox };
    params.validate()?;

    let expected_dim = json.num_latent * json.pseudo_inputs.len();
    if json.posterior_mean.len() != expected_dim
        || json.posterior_cov.rows != expected_dim
        || json.posterior_cov.cols != expected_dim
    {
        return Err(Error::InvalidInput(format!(
            "posterior dimensions do not match {} latent functions x {} pseudo-inputs",
            json.num_latent,
            json.pseudo_inputs.len()
        )));
    }
    let posterior = VariationalPosterior {
        pseudo_inputs: json.pseudo_inputs,
        mean: DVector::from_vec(json.posterior_mean),
        cov: json.posterior_cov.to_matrix()?,
        jitter: json.posterior_jitter,
    };

    if json.baseline_grid.len() != json.baseline_cum_hazard.len() {
        return Err(Error::InvalidInput(
            "baseline grid and cumulative hazard lengths differ".into(),
        ));
    }
    if json.baseline_cum_hazard.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput(
            "baseline cumulative hazard must be non-decreasing".into(),
        ));
    }
    let spline =
        SmoothingSpline::from_parts(json.baseline_spline_knots, json.baseline_spline_coefficients)?;
    let baseline =
        BaselineHazardCurve::from_parts(json.baseline_grid, json.baseline_cum_hazard, spline);

    Ok(FittedModel {
        params,
        posterior,
        baseline,
        elbo_trace: json.elbo_trace,
        data_summary: DataSummary {
            unit_ids: json.unit_ids,
            num_obs: json.num_obs,
            time_range: (json.time_range[0], json.time_range[1]),
            standardization: json.standardization.map(|[m, s]| (m, s)),
        },
        converged: json.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, GenConfig};
    use crate::inference::{fit, FitConfig, GradientMode};

    fn temp_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn dataset_round_trip_is_identical() {
        let cfg = GenConfig { num_units: 8, seed: 42, censor_frac: 0.125, ..GenConfig::default() };
        let units = gen_dataset(&cfg).unwrap();
        let dir = temp_dir();
        let long = dir.path().join("long.csv");
        let surv = dir.path().join("surv.csv");
        write_dataset_csvs(&units, &long, &surv).unwrap();
        let ds = ingest_longitudinal_csv(&long, &surv).unwrap();
        assert_eq!(ds.units, units);
        // Re-serializing produces byte-identical files.
        let long2 = dir.path().join("long2.csv");
        let surv2 = dir.path().join("surv2.csv");
        write_dataset_csvs(&ds.units, &long2, &surv2).unwrap();
        assert_eq!(fs::read(&long).unwrap(), fs::read(&long2).unwrap());
        assert_eq!(fs::read(&surv).unwrap(), fs::read(&surv2).unwrap());
    }

    #[test]
    fn missing_survival_row_names_the_unit() {
        let dir = temp_dir();
        let long = dir.path().join("long.csv");
        let surv = dir.path().join("surv.csv");
        fs::write(&long, "unit_id,time,value\n0,1,0.5\n7,1,0.3\n").unwrap();
        fs::write(&surv, "unit_id,event_time,event_indicator,w0\n0,5,1,1\n").unwrap();
        let err = ingest_longitudinal_csv(&long, &surv).unwrap_err();
        assert!(err.to_string().contains('7'), "error should name unit 7: {err}");
    }

    #[test]
    fn non_monotone_times_report_the_line() {
        let dir = temp_dir();
        let long = dir.path().join("long.csv");
        let surv = dir.path().join("surv.csv");
        fs::write(&long, "unit_id,time,value\n0,1,0.5\n0,3,0.6\n0,2,0.7\n").unwrap();
        fs::write(&surv, "unit_id,event_time,event_indicator\n0,5,1\n").unwrap();
        let err = ingest_longitudinal_csv(&long, &surv).unwrap_err();
        match err {
            Error::Schema { line, .. } => assert_eq!(line, 4),
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn bad_header_rejected() {
        let dir = temp_dir();
        let long = dir.path().join("long.csv");
        let surv = dir.path().join("surv.csv");
        fs::write(&long, "id,time,value\n0,1,0.5\n").unwrap();
        fs::write(&surv, "unit_id,event_time,event_indicator\n0,5,1\n").unwrap();
        assert!(ingest_longitudinal_csv(&long, &surv).is_err());
    }

    fn cmapss_fixture(units: usize, cycles: usize) -> String {
        let mut out = String::new();
        for u in 1..=units {
            for c in 1..=cycles {
                let mut fields = vec![u.to_string(), c.to_string()];
                for op in 0..3 {
                    fields.push(format!("{}", 0.1 * op as f64));
                }
                for s in 1..=21 {
                    let v = if s == 2 {
                        100.0 + u as f64 + 0.5 * c as f64
                    } else {
                        s as f64
                    };
                    fields.push(format!("{v}"));
                }
                out.push_str(&fields.join(" "));
                out.push('\n');
            }
        }
        out
    }

    #[test]
    fn cmapss_ingest_standardizes_and_sets_events() {
        let dir = temp_dir();
        let path = dir.path().join("train_FD001.txt");
        fs::write(&path, cmapss_fixture(5, 30)).unwrap();
        let ds = ingest_cmapss(&path, "s2", None).unwrap();
        assert_eq!(ds.units.len(), 5);
        for u in &ds.units {
            assert!(u.event_observed);
            assert_eq!(u.event_time, 30.0);
            assert_eq!(u.times.len(), 30);
        }
        let all: Vec<f64> = ds.units.iter().flat_map(|u| u.values.iter().copied()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (all.len() - 1) as f64;
        assert!(mean.abs() < 1e-8, "standardized mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-8, "standardized sd {}", var.sqrt());
        assert!(ds.standardization.is_some());
    }

    #[test]
    fn cmapss_unit_limit_and_bad_sensor() {
        let dir = temp_dir();
        let path = dir.path().join("train_FD001.txt");
        fs::write(&path, cmapss_fixture(6, 10)).unwrap();
        let ds = ingest_cmapss(&path, "s2", Some(3)).unwrap();
        assert_eq!(ds.units.len(), 3);
        let err = ingest_cmapss(&path, "s99", None).unwrap_err();
        assert!(err.to_string().contains("s1,"), "should list valid sensors: {err}");
    }

    #[test]
    fn cmapss_malformed_row_reports_line() {
        let dir = temp_dir();
        let path = dir.path().join("bad.txt");
        let mut body = cmapss_fixture(1, 3);
        body.push_str("1 4 0.0 0.1\n");
        fs::write(&path, body).unwrap();
        match ingest_cmapss(&path, "s2", None).unwrap_err() {
            Error::Schema { line, .. } => assert_eq!(line, 4),
            other => panic!("expected schema error, got {other}"),
        }
    }

    fn small_model() -> (FittedModel, Vec<UnitRecord>) {
        let cfg = GenConfig { num_units: 4, seed: 9, censor_frac: 0.0, ..GenConfig::default() };
        let mut units = gen_dataset(&cfg).unwrap();
        crate::evaluation::standardize_in_place(&mut units);
        let fit_cfg = FitConfig {
            num_pseudo_inputs: 4,
            max_iters: 10,
            restarts: 1,
            gradient: GradientMode::Analytic,
            likelihood_nodes: 8,
            ..FitConfig::default()
        };
        (fit(&units, &fit_cfg).unwrap(), units)
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let (model, _) = small_model();
        let dir = temp_dir();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(
            model.params.kernel.kernel_scales, loaded.params.kernel.kernel_scales,
            "kernel scales must round-trip exactly"
        );
        for (a, b) in model
            .posterior
            .cov
            .iter()
            .zip(loaded.posterior.cov.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(model.params.cox.signal_coef.to_bits(), loaded.params.cox.signal_coef.to_bits());
        assert_eq!(model.elbo_trace, loaded.elbo_trace);
        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.json");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_model_file_never_parses() {
        let (model, _) = small_model();
        let dir = temp_dir();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let body = fs::read(&path).unwrap();
        let truncated = &body[..body.len() / 2];
        let path2 = dir.path().join("truncated.json");
        fs::write(&path2, truncated).unwrap();
        assert!(load_model(&path2).is_err());
    }

    #[test]
    fn unknown_schema_version_rejected() {
        let (model, _) = small_model();
        let dir = temp_dir();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let body = fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        fs::write(&path, body).unwrap();
        match load_model(&path).unwrap_err() {
            Error::SchemaVersion { found, .. } => assert_eq!(found, 99),
            other => panic!("expected version error, got {other}"),
        }
    }

    #[test]
    fn invariant_violations_rejected_on_load() {
        let (model, _) = small_model();
        let dir = temp_dir();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let slope = format!("\"baseline_slope\": {}", model.params.cox.baseline_slope);
        let body = fs::read_to_string(&path)
            .unwrap()
            .replace(&slope, "\"baseline_slope\": -0.5");
        assert!(body.contains("-0.5"), "fixture must actually change the slope");
        fs::write(&path, body).unwrap();
        assert!(load_model(&path).is_err());
    }
}
