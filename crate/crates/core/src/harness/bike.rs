//! Bike-share trip records to hourly per-station demand.
//!
//! Demand at a station is the number of trips starting there in each hour.
//! A station is kept when its records (as start or end point) span at least
//! `min_span_days` and its mean demand over that span is at least
//! `min_mean_per_hour`. Customer columns are ignored.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::ssm::{Sequence, TrajectoryBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BikeLayout {
    /// One sequence whose observation vector has one entry per station.
    Multivariate,
    /// One univariate sequence per station over its own active hours.
    PerStation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BikeRules {
    pub min_span_days: f64,
    pub min_mean_per_hour: f64,
    pub layout: BikeLayout,
    /// Emit ln(1 + count) instead of raw counts (for Gaussian emissions).
    pub log_counts: bool,
}

impl Default for BikeRules {
    fn default() -> Self {
        BikeRules {
            min_span_days: 730.0,
            min_mean_per_hour: 1.0,
            layout: BikeLayout::Multivariate,
            log_counts: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_skipped: usize,
    pub stations_seen: usize,
    pub stations_kept: Vec<String>,
    pub dropped_short_span: Vec<String>,
    pub dropped_low_demand: Vec<String>,
    pub first_hour: String,
    pub hours: usize,
}

const FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
];

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn hour_of(t: &NaiveDateTime) -> i64 {
    t.and_utc().timestamp().div_euclid(3600)
}

fn normalize(h: &str) -> String {
    h.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase()
}

fn find_column(headers: &csv::StringRecord, names: &[&str]) -> Result<usize, HarnessError> {
    headers
        .iter()
        .position(|h| names.contains(&normalize(h).as_str()))
        .ok_or_else(|| HarnessError::Mismatch(format!("CSV has no column named like '{}'", names[0])))
}

#[derive(Default)]
struct Station {
    first: Option<NaiveDateTime>,
    last: Option<NaiveDateTime>,
    departures: BTreeMap<i64, u32>,
}

impl Station {
    fn seen(&mut self, t: NaiveDateTime) {
        self.first = Some(self.first.map_or(t, |f| f.min(t)));
        self.last = Some(self.last.map_or(t, |l| l.max(t)));
    }
}

pub fn ingest_bike_csv(path: &Path, rules: &BikeRules) -> Result<(TrajectoryBatch, IngestReport), HarnessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => HarnessError::io(path, io),
            other => HarnessError::Mismatch(format!("{other:?}")),
        })?;
    let headers = rdr.headers()?.clone();
    let cols = [
        find_column(&headers, &["starttime", "startdate", "startedat", "starttimestamp"])?,
        find_column(&headers, &["stoptime", "endtime", "enddate", "endedat", "stoptimestamp"])?,
        find_column(&headers, &["startstationname", "startstation", "fromstationname"])?,
        find_column(&headers, &["endstationname", "endstation", "tostationname"])?,
    ];
    let mut stations: BTreeMap<String, Station> = BTreeMap::new();
    let (mut read, mut skipped) = (0, 0);
    for rec in rdr.records() {
        read += 1;
        let Ok(rec) = rec else {
            skipped += 1;
            continue;
        };
        let field = |i: usize| rec.get(cols[i]).map(str::trim).filter(|s| !s.is_empty());
        let parsed = (|| {
            let start = parse_time(field(0)?)?;
            let end = parse_time(field(1)?)?;
            (end >= start).then_some((start, end, field(2)?.to_string(), field(3)?.to_string()))
        })();
        let Some((start, end, from, to)) = parsed else {
            skipped += 1;
            continue;
        };
        let s = stations.entry(from).or_default();
        s.seen(start);
        *s.departures.entry(hour_of(&start)).or_default() += 1;
        stations.entry(to).or_default().seen(end);
    }
    if skipped > 0 {
        eprintln!("ingest: skipped {skipped} malformed row(s) of {read}");
    }

    let mut report = IngestReport {
        rows_read: read,
        rows_skipped: skipped,
        stations_seen: stations.len(),
        stations_kept: vec![],
        dropped_short_span: vec![],
        dropped_low_demand: vec![],
        first_hour: String::new(),
        hours: 0,
    };
    let mut kept = Vec::new();
    for (name, s) in &stations {
        let (Some(first), Some(last)) = (s.first, s.last) else { continue };
        let span_days = (last - first).num_seconds() as f64 / 86_400.0;
        let hours = (hour_of(&last) - hour_of(&first) + 1) as f64;
        let total: u32 = s.departures.values().sum();
        if span_days < rules.min_span_days {
            report.dropped_short_span.push(name.clone());
        } else if (total as f64) / hours < rules.min_mean_per_hour {
            report.dropped_low_demand.push(name.clone());
        } else {
            report.stations_kept.push(name.clone());
            kept.push((name, s, hour_of(&first), hour_of(&last)));
        }
    }
    if kept.is_empty() {
        return Err(HarnessError::Empty(format!("no station of {} passed the filters", stations.len())));
    }
    let value = |c: u32| if rules.log_counts { (c as f64).ln_1p() } else { c as f64 };
    let to_string = |h: i64| {
        chrono::DateTime::from_timestamp(h * 3600, 0)
            .map(|d| d.naive_utc().format("%Y-%m-%dT%H:00:00").to_string())
            .unwrap_or_default()
    };
    let sequences = match rules.layout {
        BikeLayout::Multivariate => {
            let lo = kept.iter().map(|k| k.2).min().unwrap_or(0);
            let hi = kept.iter().map(|k| k.3).max().unwrap_or(0);
            report.first_hour = to_string(lo);
            report.hours = (hi - lo + 1) as usize;
            let y = (lo..=hi)
                .map(|h| kept.iter().map(|k| value(k.1.departures.get(&h).copied().unwrap_or(0))).collect())
                .collect();
            vec![Sequence {
                id: "bike".into(),
                y,
                u: vec![],
            }]
        }
        BikeLayout::PerStation => {
            let lo = kept.iter().map(|k| k.2).min().unwrap_or(0);
            report.first_hour = to_string(lo);
            report.hours = kept.iter().map(|k| (k.3 - k.2 + 1) as usize).max().unwrap_or(0);
            kept.iter()
                .map(|(name, s, a, b)| Sequence {
                    id: (*name).clone(),
                    y: (*a..=*b).map(|h| vec![value(s.departures.get(&h).copied().unwrap_or(0))]).collect(),
                    u: vec![],
                })
                .collect()
        }
    };
    Ok((TrajectoryBatch { sequences }, report))
}
