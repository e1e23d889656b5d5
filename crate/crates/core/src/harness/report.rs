//! Byte-deterministic CSV and summary text for a set of episode results.
//!
//! Wall times are left out of both so identical runs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::run::{EpisodeResult, Skip};
use crate::error::{Error, Result};
use crate::sim::FloorStyle;

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub const CSV_HEADER: &str = "config,fingerprint,seed,episode,episode_seed,k,support_domain,\
query_domain,iou_free,iou_obstacle,miou,leg_hits,leg_pixels,loss_first,loss_last,\
delta_miou,delta_obstacle";

pub const SKIP_HEADER: &str = "config,fingerprint,seed,episode,reason";

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Midpoint median; NaN for an empty slice.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Config names in order of first appearance.
pub fn config_order(results: &[EpisodeResult]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in results {
        if !names.contains(&r.config) {
            names.push(r.config.clone());
        }
    }
    names
}

/// Per-episode differences `(a − b)` of mIoU and obstacle IoU between two
/// configs, over the episodes both completed, keyed by `(seed, episode)`.
pub fn paired(results: &[EpisodeResult], a: &str, b: &str) -> Vec<((u64, usize), f64, f64)> {
    let base: BTreeMap<(u64, usize), &EpisodeResult> = results
        .iter()
        .filter(|r| r.config == b)
        .map(|r| ((r.seed, r.episode), r))
        .collect();
    let mut out: Vec<_> = results
        .iter()
        .filter(|r| r.config == a)
        .filter_map(|r| {
            let o = base.get(&(r.seed, r.episode))?;
            Some((
                (r.seed, r.episode),
                r.miou - o.miou,
                r.iou_obstacle - o.iou_obstacle,
            ))
        })
        .collect();
    out.sort_by_key(|x| x.0);
    out
}

/// Paired leg-recall differences `(a − b)` on episodes whose queries contain
/// leg pixels.
pub fn paired_leg_recall(results: &[EpisodeResult], a: &str, b: &str) -> Vec<f64> {
    let base: BTreeMap<(u64, usize), &EpisodeResult> = results
        .iter()
        .filter(|r| r.config == b)
        .map(|r| ((r.seed, r.episode), r))
        .collect();
    let mut keyed: Vec<((u64, usize), f64)> = results
        .iter()
        .filter(|r| r.config == a)
        .filter_map(|r| {
            let o = base.get(&(r.seed, r.episode))?;
            Some(((r.seed, r.episode), r.leg_recall()? - o.leg_recall()?))
        })
        .collect();
    keyed.sort_by_key(|x| x.0);
    keyed.into_iter().map(|x| x.1).collect()
}

/// One row per result; deltas are against `baseline` on the same
/// `(seed, episode)` and empty when the baseline row is missing.
pub fn results_csv(results: &[EpisodeResult], baseline: &str) -> String {
    let base: BTreeMap<(u64, usize), &EpisodeResult> = results
        .iter()
        .filter(|r| r.config == baseline)
        .map(|r| ((r.seed, r.episode), r))
        .collect();
    let mut out = format!("{CSV_HEADER}\n");
    for r in results {
        let (dm, dob) = match base.get(&(r.seed, r.episode)) {
            Some(b) => (
                (r.miou - b.miou).to_string(),
                (r.iou_obstacle - b.iou_obstacle).to_string(),
            ),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config,
            r.fingerprint,
            r.seed,
            r.episode,
            r.episode_seed,
            r.k,
            r.support_domain,
            r.query_domain,
            r.iou_free,
            r.iou_obstacle,
            r.miou,
            r.leg_hits,
            r.leg_pixels,
            r.loss_first,
            r.loss_last,
            dm,
            dob
        );
    }
    out
}

fn field<T: std::str::FromStr>(cols: &[&str], i: usize, line: usize) -> Result<T> {
    cols.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("results csv", format!("line {line}, column {}", i + 1)))
}

/// Parses [`results_csv`] output; the delta columns are ignored.
pub fn parse_results_csv(text: &str) -> Result<Vec<EpisodeResult>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(Error::format("results csv", "missing header")),
    }
    let mut out = Vec::new();
    for (n, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 17 {
            return Err(Error::format(
                "results csv",
                format!("line {} has {} columns", n + 1, c.len()),
            ));
        }
        out.push(EpisodeResult {
            config: c[0].to_string(),
            fingerprint: c[1].to_string(),
            seed: field(&c, 2, n + 1)?,
            episode: field(&c, 3, n + 1)?,
            episode_seed: field(&c, 4, n + 1)?,
            k: field(&c, 5, n + 1)?,
            support_domain: FloorStyle::parse(c[6])?,
            query_domain: FloorStyle::parse(c[7])?,
            iou_free: field(&c, 8, n + 1)?,
            iou_obstacle: field(&c, 9, n + 1)?,
            miou: field(&c, 10, n + 1)?,
            leg_hits: field(&c, 11, n + 1)?,
            leg_pixels: field(&c, 12, n + 1)?,
            loss_first: field(&c, 13, n + 1)?,
            loss_last: field(&c, 14, n + 1)?,
            wall_secs: 0.0,
        });
    }
    Ok(out)
}

pub fn skips_csv(skips: &[Skip]) -> String {
    let mut out = format!("{SKIP_HEADER}\n");
    for s in skips {
        let reason = s.reason.replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{reason}",
            s.config, s.fingerprint, s.seed, s.episode
        );
    }
    out
}

pub fn parse_skips_csv(text: &str) -> Result<Vec<Skip>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SKIP_HEADER => {}
        _ => return Err(Error::format("skips csv", "missing header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let c: Vec<&str> = line.splitn(5, ',').collect();
            if c.len() != 5 {
                return Err(Error::format("skips csv", format!("line {}", n + 1)));
            }
            Ok(Skip {
                config: c[0].to_string(),
                fingerprint: c[1].to_string(),
                seed: field(&c, 2, n + 1)?,
                episode: field(&c, 3, n + 1)?,
                reason: c[4].to_string(),
            })
        })
        .collect()
}

/// Rendered report files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub csv: String,
    pub summary: String,
}

/// Builds the CSV and summary. The last config in order of appearance is the
/// paired baseline unless `baseline` names another.
pub fn build_report(
    results: &[EpisodeResult],
    skips: &[Skip],
    baseline: Option<&str>,
) -> Result<Report> {
    let names = config_order(results);
    let Some(last) = names.last() else {
        return Err(Error::Validation("report needs at least one result".into()));
    };
    let base = baseline.unwrap_or(last).to_string();
    if !names.contains(&base) {
        return Err(Error::Validation(format!(
            "baseline `{base}` has no results"
        )));
    }
    let mut s = String::new();
    let _ = writeln!(s, "version={VERSION}");
    let _ = writeln!(s, "rows={}", results.len());
    let _ = writeln!(s, "skipped={}", skips.len());
    let _ = writeln!(s, "baseline={base}");
    for name in &names {
        let rows: Vec<&EpisodeResult> = results.iter().filter(|r| &r.config == name).collect();
        let col = |f: fn(&EpisodeResult) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let legs: Vec<f64> = rows.iter().filter_map(|r| r.leg_recall()).collect();
        let decreased = rows.iter().filter(|r| r.loss_last < r.loss_first).count();
        let _ = writeln!(s, "\n[{name}]");
        let _ = writeln!(s, "fingerprint={}", rows[0].fingerprint);
        let _ = writeln!(s, "episodes={}", rows.len());
        let _ = writeln!(
            s,
            "skipped={}",
            skips.iter().filter(|k| &k.config == name).count()
        );
        for (label, v) in [
            ("iou_free", col(|r| r.iou_free)),
            ("iou_obstacle", col(|r| r.iou_obstacle)),
            ("miou", col(|r| r.miou)),
        ] {
            let _ = writeln!(s, "{label}_mean={:.6}", mean(&v));
            let _ = writeln!(s, "{label}_median={:.6}", median(&v));
        }
        let _ = writeln!(s, "leg_recall_episodes={}", legs.len());
        let _ = writeln!(s, "leg_recall_mean={:.6}", mean(&legs));
        let _ = writeln!(s, "loss_decreased={decreased}/{}", rows.len());
        if name != &base {
            let p = paired(results, name, &base);
            let dm: Vec<f64> = p.iter().map(|x| x.1).collect();
            let dob: Vec<f64> = p.iter().map(|x| x.2).collect();
            let pos = dob.iter().filter(|&&d| d > 0.0).count();
            let legs = paired_leg_recall(results, name, &base);
            let _ = writeln!(s, "paired_episodes={}", p.len());
            let _ = writeln!(s, "delta_miou_mean={:.6}", mean(&dm));
            let _ = writeln!(s, "delta_miou_median={:.6}", median(&dm));
            let _ = writeln!(s, "delta_obstacle_positive={pos}/{}", dob.len());
            let _ = writeln!(s, "delta_leg_recall_median={:.6}", median(&legs));
        }
    }
    Ok(Report {
        csv: results_csv(results, &base),
        summary: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(config: &str, seed: u64, episode: usize, miou: f64) -> EpisodeResult {
        EpisodeResult {
            config: config.into(),
            fingerprint: "abc".into(),
            seed,
            episode,
            episode_seed: 7,
            k: 1,
            support_domain: FloorStyle::Wood,
            query_domain: FloorStyle::TileWhite,
            iou_free: miou,
            iou_obstacle: miou,
            miou,
            leg_hits: 1,
            leg_pixels: 2,
            loss_first: 0.7,
            loss_last: 0.6,
            wall_secs: 1.5,
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn csv_round_trip_and_deltas() {
        let rs = vec![
            row("a", 1, 0, 0.9),
            row("a", 1, 1, 0.3),
            row("b", 1, 0, 0.5),
        ];
        let csv = results_csv(&rs, "b");
        let back = parse_results_csv(&csv).unwrap();
        let mut expect = rs.clone();
        expect.iter_mut().for_each(|r| r.wall_secs = 0.0);
        assert_eq!(back, expect);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[1].ends_with(&format!(",{},{}", 0.9 - 0.5, 0.9 - 0.5)));
        assert!(lines[2].ends_with(",,"));
    }

    #[test]
    fn empty_report_is_rejected() {
        assert!(matches!(
            build_report(&[], &[], None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn skips_round_trip() {
        let s = vec![Skip {
            config: "a".into(),
            fingerprint: "f".into(),
            seed: 2,
            episode: 3,
            reason: "no valid episode; tried".into(),
        }];
        assert_eq!(parse_skips_csv(&skips_csv(&s)).unwrap(), s);
    }
}
