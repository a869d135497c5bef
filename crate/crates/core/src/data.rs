//! CSV ingestion, column roles and the data-preparation transforms:
//! standardization, compositional log-ratios and the survival-to-Poisson
//! expansion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Family, FamilySpec};
use crate::model::Dataset;

/// Default replacement for zero counts before the log-ratio transform.
pub const ZERO_REPLACEMENT: f64 = 0.5;
pub const INTERCEPT: &str = "(Intercept)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Response,
    LockedIn,
    Putative,
    Time,
    Event,
    Id,
    Ignore,
}

impl Role {
    /// Whether cells in a column with this role must be numeric.
    pub fn is_numeric(self) -> bool {
        !matches!(self, Role::Id | Role::Ignore)
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "response" | "y" => Role::Response,
            "locked_in" | "locked" => Role::LockedIn,
            "putative" => Role::Putative,
            "time" => Role::Time,
            "event" | "status" => Role::Event,
            "id" => Role::Id,
            "ignore" => Role::Ignore,
            other => return Err(Error::Schema(format!("unknown role '{other}'"))),
        })
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Response => "response",
            Role::LockedIn => "locked_in",
            Role::Putative => "putative",
            Role::Time => "time",
            Role::Event => "event",
            Role::Id => "id",
            Role::Ignore => "ignore",
        };
        f.write_str(s)
    }
}

/// Column-name → role mapping. Columns the schema does not name get the
/// default role (`*` entry, putative unless overridden).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    pub roles: BTreeMap<String, Role>,
    pub default: Role,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            roles: BTreeMap::new(),
            default: Role::Putative,
        }
    }
}

impl Schema {
    /// Parses `name = role` lines; `#` starts a comment, `*` sets the default.
    pub fn parse(text: &str) -> Result<Self> {
        let mut schema = Schema::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, role) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Schema(format!("line {}: expected 'column = role'", lineno + 1)))?;
            let name = name.trim();
            let role: Role = role.parse()?;
            if name == "*" {
                schema.default = role;
            } else if schema.roles.insert(name.to_string(), role).is_some() {
                return Err(Error::Schema(format!("column '{name}' listed twice")));
            }
        }
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn with(mut self, name: &str, role: Role) -> Self {
        self.roles.insert(name.to_string(), role);
        self
    }

    pub fn role_of(&self, name: &str) -> Role {
        self.roles.get(name).copied().unwrap_or(self.default)
    }
}

/// Named numeric columns with role tags.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub names: Vec<String>,
    pub roles: Vec<Role>,
    pub columns: Vec<Vec<f64>>,
}

impl RawTable {
    pub fn new(names: Vec<String>, roles: Vec<Role>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let table = Self { names, roles, columns };
        table.validate()?;
        Ok(table)
    }

    pub fn n(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    /// Indices of the columns carrying `role`, in table order.
    pub fn with_role(&self, role: Role) -> Vec<usize> {
        (0..self.names.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.roles.len() || self.names.len() != self.columns.len() {
            return Err(Error::Schema("names, roles and columns differ in length".into()));
        }
        let mut seen = HashSet::new();
        for name in &self.names {
            if !seen.insert(name) {
                return Err(Error::Schema(format!("duplicate column '{name}'")));
            }
        }
        let n = self.n();
        if self.columns.iter().any(|c| c.len() != n) {
            return Err(Error::Schema("columns have different lengths".into()));
        }
        if n < 2 {
            return Err(Error::Schema(format!("need at least 2 rows, found {n}")));
        }
        let count = |r| self.with_role(r).len();
        let (resp, time, event) = (count(Role::Response), count(Role::Time), count(Role::Event));
        let ok = (resp == 1 && time == 0 && event == 0) || (resp == 0 && time == 1 && event == 1);
        if !ok {
            return Err(Error::Schema(format!(
                "need exactly one response column or one time/event pair (found {resp} response, {time} time, {event} event)"
            )));
        }
        Ok(())
    }

    pub fn is_survival(&self) -> bool {
        !self.with_role(Role::Time).is_empty()
    }
}

/// Reads a comma-separated file with a header row. Columns whose role is
/// `id` or `ignore` are not parsed and not kept.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(Error::Schema(format!("duplicate header '{h}'")));
        }
    }
    for name in schema.roles.keys() {
        if !seen.contains(name.as_str()) {
            return Err(Error::Schema(format!("schema names column '{name}', which is not in the file")));
        }
    }
    let roles: Vec<Role> = header.iter().map(|h| schema.role_of(h)).collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| roles[i].is_numeric()).collect();
    let mut columns = vec![Vec::new(); keep.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (slot, &i) in keep.iter().enumerate() {
            let cell = record.get(i).unwrap_or("");
            let value = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row: row + 1,
                    column: header[i].clone(),
                    value: cell.to_string(),
                })?;
            columns[slot].push(value);
        }
    }
    RawTable::new(
        keep.iter().map(|&i| header[i].clone()).collect(),
        keep.iter().map(|&i| roles[i]).collect(),
        columns,
    )
}

/// Centering and scaling applied to one putative column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub columns: Vec<ColumnScale>,
}

impl Standardization {
    /// Maps coefficients fitted on standardized columns back to the original
    /// scale. `coefs` is keyed by column name; the intercept (if named in
    /// `coefs`) absorbs the centering.
    pub fn back_map(&self, coefs: &[(String, f64)]) -> Vec<(String, f64)> {
        let scales: HashMap<&str, &ColumnScale> = self.columns.iter().map(|c| (c.name.as_str(), c)).collect();
        let mut shift = 0.0;
        let mut out: Vec<(String, f64)> = coefs
            .iter()
            .map(|(name, b)| match scales.get(name.as_str()) {
                Some(s) => {
                    shift += b * s.mean / s.sd;
                    (name.clone(), b / s.sd)
                }
                None => (name.clone(), *b),
            })
            .collect();
        if let Some(entry) = out.iter_mut().find(|(n, _)| n == INTERCEPT) {
            entry.1 -= shift;
        }
        out
    }
}

/// Centers every putative column and scales it to unit sample standard deviation.
pub fn standardize_putative(table: &RawTable) -> Result<(RawTable, Standardization)> {
    let mut out = table.clone();
    let mut record = Standardization::default();
    let n = table.n() as f64;
    for i in table.with_role(Role::Putative) {
        let col = &table.columns[i];
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ConstantColumn(table.names[i].clone()));
        }
        out.columns[i] = col.iter().map(|v| (v - mean) / sd).collect();
        record.columns.push(ColumnScale {
            name: table.names[i].clone(),
            mean,
            sd,
        });
    }
    Ok((out, record))
}

/// Replaces the putative (compositional) columns by log-ratios against
/// `reference`: zeros become `zero_replacement`, rows are renormalized to
/// sum 1, and z_ij ← log(z_ij / z_i,ref). The reference column is dropped.
pub fn compositional_logratio(table: &RawTable, reference: &str, zero_replacement: f64) -> Result<RawTable> {
    let bad = |msg: String| Err(Error::validation("data_pipeline", msg));
    if !(zero_replacement > 0.0) {
        return bad(format!("zero replacement must be positive, got {zero_replacement}"));
    }
    let parts = table.with_role(Role::Putative);
    let Some(ref_idx) = table.names.iter().position(|n| n == reference) else {
        return Err(Error::Schema(format!("reference column '{reference}' not found")));
    };
    if !parts.contains(&ref_idx) {
        return bad(format!("reference column '{reference}' is not a putative column"));
    }
    for &i in &parts {
        if let Some(row) = table.columns[i].iter().position(|&v| v < 0.0) {
            return bad(format!(
                "negative count in column '{}' at row {}",
                table.names[i],
                row + 1
            ));
        }
    }
    let n = table.n();
    let mut out = table.clone();
    for row in 0..n {
        let vals: Vec<f64> = parts
            .iter()
            .map(|&i| {
                let v = table.columns[i][row];
                if v == 0.0 {
                    zero_replacement
                } else {
                    v
                }
            })
            .collect();
        let total: f64 = vals.iter().sum();
        let ref_val = vals[parts.iter().position(|&i| i == ref_idx).expect("reference is a part")] / total;
        for (slot, &i) in parts.iter().enumerate() {
            out.columns[i][row] = (vals[slot] / total / ref_val).ln();
        }
    }
    out.names.remove(ref_idx);
    out.roles.remove(ref_idx);
    out.columns.remove(ref_idx);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    /// Death/recurrence (true) or censoring (false).
    pub event: bool,
    /// Putative covariates.
    pub z: Vec<f64>,
    /// Locked-in covariates.
    pub x: Vec<f64>,
}

/// One row of the Poisson expansion, for bookkeeping and tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandedRow {
    /// 1-based index of the event time.
    pub h: usize,
    /// Covariate group (index of its first subject).
    pub group: usize,
    pub deaths: f64,
    pub at_risk: f64,
}

#[derive(Clone, Debug)]
pub struct SurvivalExpansion {
    pub data: Dataset<f64>,
    pub rows: Vec<ExpandedRow>,
    pub event_times: Vec<f64>,
}

/// Recasts proportional-hazards data as Poisson counts: for every distinct
/// event time t_h and every covariate pattern j present in the risk set
/// {time ≥ t_h}, one row with Y = deaths of pattern j at t_h, offset
/// log N_hj (the pattern's risk-set size) and an indicator α_h for the time.
pub fn survival_to_poisson(
    records: &[SurvivalRecord],
    z_names: &[String],
    x_names: &[String],
) -> Result<SurvivalExpansion> {
    let bad = |msg: String| Err(Error::validation("data_pipeline", msg));
    for (i, r) in records.iter().enumerate() {
        if !(r.time > 0.0 && r.time.is_finite()) {
            return bad(format!("record {}: time must be positive, got {}", i + 1, r.time));
        }
        if r.z.len() != z_names.len() || r.x.len() != x_names.len() {
            return bad(format!("record {}: covariate count does not match the names", i + 1));
        }
    }
    let mut event_times: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.time).collect();
    if event_times.is_empty() {
        return Err(Error::NoEvents);
    }
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();

    // Group subjects by exact covariate pattern; a group is named by its first subject.
    let key = |r: &SurvivalRecord| -> Vec<u64> { r.z.iter().chain(&r.x).map(|v| v.to_bits()).collect() };
    let mut group_of = Vec::with_capacity(records.len());
    let mut first: HashMap<Vec<u64>, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        group_of.push(*first.entry(key(r)).or_insert(i));
    }

    let mut rows = Vec::new();
    for (h, &t) in event_times.iter().enumerate() {
        let mut at_risk: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.time >= t {
                let entry = at_risk.entry(group_of[i]).or_insert((0.0, 0.0));
                entry.0 += 1.0;
                if r.event && r.time == t {
                    entry.1 += 1.0;
                }
            }
        }
        for (group, (n, d)) in at_risk {
            rows.push(ExpandedRow {
                h: h + 1,
                group,
                deaths: d,
                at_risk: n,
            });
        }
    }

    let q = event_times.len();
    let m = rows.len();
    let (jx, kz) = (x_names.len(), z_names.len());
    let mut x = Array2::<f64>::zeros((m, q + jx));
    let mut z = Array2::<f64>::zeros((m, kz));
    for (r, row) in rows.iter().enumerate() {
        x[[r, row.h - 1]] = 1.0;
        let rec = &records[row.group];
        for c in 0..jx {
            x[[r, q + c]] = rec.x[c];
        }
        for c in 0..kz {
            z[[r, c]] = rec.z[c];
        }
    }
    let y = Array1::from_iter(rows.iter().map(|r| r.deaths));
    let offset = Array1::from_iter(rows.iter().map(|r| r.at_risk.ln()));
    let mut xn: Vec<String> = (1..=q).map(|h| format!("alpha_{h}")).collect();
    xn.extend(x_names.iter().cloned());
    let data = Dataset::new(y, x, z, xn, z_names.to_vec(), FamilySpec::unit_weights(Family::Poisson, m))?
        .with_offset(offset)?;
    Ok(SurvivalExpansion {
        data,
        rows,
        event_times,
    })
}

/// Builds a dataset from a non-survival table: y from the response column,
/// X = [intercept, locked-in columns], Z = putative columns.
pub fn table_to_dataset(table: &RawTable, family: Family) -> Result<Dataset<f64>> {
    table.validate()?;
    if table.is_survival() {
        return Err(Error::validation(
            "data_pipeline",
            "table has time/event columns; use the survival expansion",
        ));
    }
    let n = table.n();
    let y = Array1::from(table.columns[table.with_role(Role::Response)[0]].clone());
    let locked = table.with_role(Role::LockedIn);
    let putative = table.with_role(Role::Putative);
    if putative.is_empty() {
        return Err(Error::Schema("no putative columns".into()));
    }
    let mut x = Array2::<f64>::ones((n, 1 + locked.len()));
    for (c, &i) in locked.iter().enumerate() {
        x.column_mut(c + 1).assign(&Array1::from(table.columns[i].clone()));
    }
    let z = Array2::from_shape_fn((n, putative.len()), |(r, c)| table.columns[putative[c]][r]);
    let mut x_names = vec![INTERCEPT.to_string()];
    x_names.extend(locked.iter().map(|&i| table.names[i].clone()));
    let z_names = putative.iter().map(|&i| table.names[i].clone()).collect();
    Dataset::new(y, x, z, x_names, z_names, FamilySpec::unit_weights(family, n))
}

/// Survival records from a table with time/event roles; event is any nonzero value.
pub fn table_to_survival(table: &RawTable) -> Result<SurvivalExpansion> {
    table.validate()?;
    let (Some(&t), Some(&e)) = (table.with_role(Role::Time).first(), table.with_role(Role::Event).first()) else {
        return Err(Error::Schema("survival expansion needs a time and an event column".into()));
    };
    let putative = table.with_role(Role::Putative);
    let locked = table.with_role(Role::LockedIn);
    let records: Vec<SurvivalRecord> = (0..table.n())
        .map(|r| SurvivalRecord {
            time: table.columns[t][r],
            event: table.columns[e][r] != 0.0,
            z: putative.iter().map(|&i| table.columns[i][r]).collect(),
            x: locked.iter().map(|&i| table.columns[i][r]).collect(),
        })
        .collect();
    let z_names: Vec<String> = putative.iter().map(|&i| table.names[i].clone()).collect();
    let x_names: Vec<String> = locked.iter().map(|&i| table.names[i].clone()).collect();
    survival_to_poisson(&records, &z_names, &x_names)
}
