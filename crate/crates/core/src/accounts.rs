//! Member accounts: session ingestion, account classification and the
//! private-user region filter.
//!
//! Classification ignores every session that starts inside the exclusion
//! window, then applies the filters in a fixed precedence: unplugged, then
//! shared (overlap, daily count, energy rate), then rental, and finally
//! private.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{LatLon, Polygon};
use crate::stats::quantile_sorted;
use crate::Level;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{file}:{line}: malformed timestamp in column `{column}`: {value:?}")]
    Timestamp { file: String, line: u64, column: &'static str, value: String },
    #[error("{file}:{line}: invalid value in column `{column}`: {value:?}")]
    Field { file: String, line: u64, column: &'static str, value: String },
    #[error("{file}:{line}: session ends before it starts")]
    NegativeDuration { file: String, line: u64 },
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: &'static str },
    #[error("session references unknown account `{0}`")]
    UnknownAccount(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSession {
    pub session_id: String,
    pub account_id: String,
    pub outlet_id: String,
    pub station_id: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub energy_kwh: f64,
    pub level: Level,
    pub soc_start: Option<f64>,
    pub soc_end: Option<f64>,
}

impl RawSession {
    pub fn duration_minutes(&self) -> f64 {
        (self.end - self.start).num_seconds() as f64 / 60.0
    }

    fn overlaps(&self, other: &RawSession) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: String,
    pub created: DateTime<Utc>,
    pub postal_centroid: Option<LatLon>,
    /// Sorted by start time.
    pub sessions: Vec<RawSession>,
}

impl Account {
    pub fn new(account_id: impl Into<String>, created: DateTime<Utc>) -> Self {
        Self { account_id: account_id.into(), created, postal_centroid: None, sessions: Vec::new() }
    }

    pub fn sort_sessions(&mut self) {
        self.sessions.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.session_id.cmp(&b.session_id)));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AccountClass {
    Unplugged,
    Shared,
    Rental,
    Private,
}

/// The filter that decided an account's class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassReason {
    NoSessions,
    OverlappingSessions,
    DailySessionCount,
    MonthlyEnergy,
    AnnualEnergy,
    ShortLivedAccount,
    NoFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub class: AccountClass,
    pub reason: ClassReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl ExclusionWindow {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Option<Self> {
        (start < end).then_some(Self { start, end })
    }

    /// Half-open: `[start, end)`.
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }
}

impl Default for ExclusionWindow {
    /// 2020-02-01 through 2021-06-30 inclusive.
    fn default() -> Self {
        Self {
            start: Utc.with_ymd_and_hms(2020, 2, 1, 0, 0, 0).unwrap(),
            end: Utc.with_ymd_and_hms(2021, 7, 1, 0, 0, 0).unwrap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precedence {
    SharedFirst,
    RentalFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// A calendar day with at least this many sessions marks the account shared.
    pub shared_daily_sessions: usize,
    pub monthly_energy_cap_kwh: f64,
    pub annual_energy_cap_kwh: f64,
    pub rental_max_days: i64,
    pub rental_min_sessions: usize,
    pub precedence: Precedence,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            shared_daily_sessions: 4,
            monthly_energy_cap_kwh: 500.0,
            annual_energy_cap_kwh: 6000.0,
            rental_max_days: 14,
            rental_min_sessions: 3,
            precedence: Precedence::SharedFirst,
        }
    }
}

fn month_index(t: DateTime<Utc>) -> i64 {
    t.year() as i64 * 12 + t.month0() as i64
}

/// Calendar months spanned by `[first, last]`, counting both end months.
fn months_spanned(first: DateTime<Utc>, last: DateTime<Utc>) -> i64 {
    (month_index(last) - month_index(first) + 1).max(1)
}

fn shared_reason(sessions: &[&RawSession], cfg: &ClassifierConfig) -> Option<ClassReason> {
    // sessions are sorted by start, so any overlap involves a session starting
    // before the running maximum end time
    let mut max_end: Option<&RawSession> = None;
    for s in sessions {
        if let Some(prev) = max_end {
            if prev.overlaps(s) {
                return Some(ClassReason::OverlappingSessions);
            }
        }
        if max_end.is_none_or(|p| s.end > p.end) {
            max_end = Some(s);
        }
    }

    let mut per_day: BTreeMap<NaiveDate, usize> = BTreeMap::new();
    for s in sessions {
        *per_day.entry(s.start.date_naive()).or_default() += 1;
    }
    if per_day.values().any(|&n| n >= cfg.shared_daily_sessions) {
        return Some(ClassReason::DailySessionCount);
    }

    let total: f64 = sessions.iter().map(|s| s.energy_kwh).sum();
    let months = months_spanned(sessions[0].start, sessions[sessions.len() - 1].start);
    if total / months as f64 > cfg.monthly_energy_cap_kwh {
        return Some(ClassReason::MonthlyEnergy);
    }
    let years = (months as f64 / 12.0).max(1.0);
    if total / years > cfg.annual_energy_cap_kwh {
        return Some(ClassReason::AnnualEnergy);
    }
    None
}

fn rental_reason(acct: &Account, sessions: &[&RawSession], cfg: &ClassifierConfig) -> Option<ClassReason> {
    let last = sessions[sessions.len() - 1].start;
    let span = last - acct.created;
    let in_span = sessions.iter().filter(|s| s.start >= acct.created).count();
    (span < chrono::Duration::days(cfg.rental_max_days) && in_span >= cfg.rental_min_sessions)
        .then_some(ClassReason::ShortLivedAccount)
}

/// Assigns exactly one class to an account. Sessions that start inside the
/// exclusion window are ignored by every rule.
pub fn classify_account(acct: &Account, window: &ExclusionWindow, cfg: &ClassifierConfig) -> Classification {
    let mut sessions: Vec<&RawSession> = acct.sessions.iter().filter(|s| !window.contains(s.start)).collect();
    sessions.sort_by(|a, b| a.start.cmp(&b.start));
    if sessions.is_empty() {
        return Classification { class: AccountClass::Unplugged, reason: ClassReason::NoSessions };
    }
    let shared = || shared_reason(&sessions, cfg).map(|r| Classification { class: AccountClass::Shared, reason: r });
    let rental =
        || rental_reason(acct, &sessions, cfg).map(|r| Classification { class: AccountClass::Rental, reason: r });
    let decided = match cfg.precedence {
        Precedence::SharedFirst => shared().or_else(rental),
        Precedence::RentalFirst => rental().or_else(shared),
    };
    decided.unwrap_or(Classification { class: AccountClass::Private, reason: ClassReason::NoFilter })
}

/// Keeps the accounts whose postal centroid lies in `region` and that never
/// charge more than `max_daily` times per day at stations in
/// `region_stations`. Accounts without a centroid are dropped.
pub fn filter_private_region<'a>(
    accounts: impl IntoIterator<Item = &'a Account>,
    region: &Polygon,
    region_stations: &HashSet<String>,
    max_daily: usize,
) -> Vec<&'a Account> {
    accounts
        .into_iter()
        .filter(|a| a.postal_centroid.is_some_and(|c| region.contains(c)))
        .filter(|a| {
            let mut per_day: BTreeMap<NaiveDate, usize> = BTreeMap::new();
            for s in a.sessions.iter().filter(|s| region_stations.contains(&s.station_id)) {
                *per_day.entry(s.start.date_naive()).or_default() += 1;
            }
            per_day.values().all(|&n| n <= max_daily)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    fn of(mut values: Vec<f64>) -> Self {
        crate::stats::sort_floats(&mut values);
        Self {
            q1: quantile_sorted(&values, 0.25).unwrap_or(0.0),
            median: quantile_sorted(&values, 0.5).unwrap_or(0.0),
            q3: quantile_sorted(&values, 0.75).unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub duration_minutes: Quartiles,
    pub energy_kwh: Quartiles,
    /// Sessions per calendar month over the spanned months.
    pub monthly_sessions: f64,
    /// Mean number of distinct stations used per spanned month.
    pub monthly_distinct_stations: f64,
}

pub fn session_summary<'a>(
    sessions: impl IntoIterator<Item = &'a RawSession>,
    duration_cap_minutes: u32,
) -> SummaryStats {
    let sessions: Vec<&RawSession> = sessions.into_iter().collect();
    if sessions.is_empty() {
        return SummaryStats::default();
    }
    let cap = duration_cap_minutes as f64;
    let durations = sessions.iter().map(|s| s.duration_minutes().min(cap)).collect();
    let energies = sessions.iter().map(|s| s.energy_kwh).collect();

    let first = sessions.iter().map(|s| s.start).min().unwrap();
    let last = sessions.iter().map(|s| s.start).max().unwrap();
    let months = months_spanned(first, last) as f64;
    let mut stations_by_month: BTreeMap<i64, BTreeSet<&str>> = BTreeMap::new();
    for s in &sessions {
        stations_by_month.entry(month_index(s.start)).or_default().insert(&s.station_id);
    }
    let distinct: usize = stations_by_month.values().map(BTreeSet::len).sum();

    SummaryStats {
        count: sessions.len(),
        duration_minutes: Quartiles::of(durations),
        energy_kwh: Quartiles::of(energies),
        monthly_sessions: sessions.len() as f64 / months,
        monthly_distinct_stations: distinct as f64 / months,
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion

pub(crate) fn parse_timestamp(
    file: &str,
    line: u64,
    column: &'static str,
    raw: &str,
) -> Result<DateTime<Utc>, IngestError> {
    DateTime::parse_from_rfc3339(raw.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| IngestError::Timestamp { file: file.into(), line, column, value: raw.into() })
}

fn parse_f64(file: &str, line: u64, column: &'static str, raw: &str) -> Result<f64, IngestError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IngestError::Field { file: file.into(), line, column, value: raw.into() })
}

fn parse_opt_f64(file: &str, line: u64, column: &'static str, raw: &str) -> Result<Option<f64>, IngestError> {
    if raw.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(file, line, column, raw).map(Some)
    }
}

fn column_index(
    headers: &csv::StringRecord,
    file: &str,
    column: &'static str,
) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h.trim() == column)
        .ok_or(IngestError::MissingColumn { file: file.into(), column })
}

/// Reads `session_id,account_id,outlet_id,station_id,start_iso8601,end_iso8601,energy_kwh,level,soc_start,soc_end`.
pub fn read_sessions<R: Read>(reader: R, file: &str) -> Result<Vec<RawSession>, IngestError> {
    const COLS: [&str; 10] = [
        "session_id",
        "account_id",
        "outlet_id",
        "station_id",
        "start_iso8601",
        "end_iso8601",
        "energy_kwh",
        "level",
        "soc_start",
        "soc_end",
    ];
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = COLS.iter().map(|c| column_index(&headers, file, c)).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row as u64 + 2;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let start = parse_timestamp(file, line, COLS[4], get(4))?;
        let end = parse_timestamp(file, line, COLS[5], get(5))?;
        if end < start {
            return Err(IngestError::NegativeDuration { file: file.into(), line });
        }
        let energy_kwh = parse_f64(file, line, COLS[6], get(6))?;
        if energy_kwh < 0.0 {
            return Err(IngestError::Field { file: file.into(), line, column: COLS[6], value: get(6).into() });
        }
        let level: Level = get(7)
            .parse()
            .map_err(|_| IngestError::Field { file: file.into(), line, column: COLS[7], value: get(7).into() })?;
        out.push(RawSession {
            session_id: get(0).into(),
            account_id: get(1).into(),
            outlet_id: get(2).into(),
            station_id: get(3).into(),
            start,
            end,
            energy_kwh,
            level,
            soc_start: parse_opt_f64(file, line, COLS[8], get(8))?,
            soc_end: parse_opt_f64(file, line, COLS[9], get(9))?,
        });
    }
    Ok(out)
}

/// Reads `account_id,created_iso8601,postal_lat,postal_lon` (empty lat/lon for
/// accounts without a postal code).
pub fn read_accounts<R: Read>(reader: R, file: &str) -> Result<Vec<Account>, IngestError> {
    const COLS: [&str; 4] = ["account_id", "created_iso8601", "postal_lat", "postal_lon"];
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = COLS.iter().map(|c| column_index(&headers, file, c)).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row as u64 + 2;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let created = parse_timestamp(file, line, COLS[1], get(1))?;
        let lat = parse_opt_f64(file, line, COLS[2], get(2))?;
        let lon = parse_opt_f64(file, line, COLS[3], get(3))?;
        let mut acct = Account::new(get(0), created);
        acct.postal_centroid = lat.zip(lon).map(|(lat, lon)| LatLon::new(lat, lon));
        out.push(acct);
    }
    Ok(out)
}

/// Loads both files and attaches every session to its account.
pub fn load_accounts(accounts_csv: &Path, sessions_csv: &Path) -> Result<Vec<Account>, IngestError> {
    let mut accounts = read_accounts(std::fs::File::open(accounts_csv)?, &accounts_csv.display().to_string())?;
    let sessions = read_sessions(std::fs::File::open(sessions_csv)?, &sessions_csv.display().to_string())?;
    let index: BTreeMap<String, usize> =
        accounts.iter().enumerate().map(|(i, a)| (a.account_id.clone(), i)).collect();
    for s in sessions {
        let i = *index.get(&s.account_id).ok_or_else(|| IngestError::UnknownAccount(s.account_id.clone()))?;
        accounts[i].sessions.push(s);
    }
    for a in &mut accounts {
        a.sort_sessions();
    }
    Ok(accounts)
}

fn iso(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_accounts<W: Write>(accounts: &[Account], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["account_id", "created_iso8601", "postal_lat", "postal_lon"])?;
    for a in accounts {
        let (lat, lon) = a.postal_centroid.map_or((None, None), |c| (Some(c.lat), Some(c.lon)));
        w.write_record([a.account_id.clone(), iso(a.created), opt_num(lat), opt_num(lon)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sessions<'a, W: Write>(sessions: impl IntoIterator<Item = &'a RawSession>, out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "session_id",
        "account_id",
        "outlet_id",
        "station_id",
        "start_iso8601",
        "end_iso8601",
        "energy_kwh",
        "level",
        "soc_start",
        "soc_end",
    ])?;
    for s in sessions {
        w.write_record([
            s.session_id.clone(),
            s.account_id.clone(),
            s.outlet_id.clone(),
            s.station_id.clone(),
            iso(s.start),
            iso(s.end),
            s.energy_kwh.to_string(),
            s.level.to_string(),
            opt_num(s.soc_start),
            opt_num(s.soc_end),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `account_id,class,reason`, one row per account in input order.
pub fn write_classifications<W: Write>(rows: &[(String, Classification)], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["account_id", "class", "reason"])?;
    for (id, c) in rows {
        w.write_record([id.clone(), format!("{:?}", c.class), format!("{:?}", c.reason)])?;
    }
    w.flush()?;
    Ok(())
}
