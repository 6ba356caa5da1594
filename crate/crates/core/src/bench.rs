//! Benchmarks: AR vs speculative decoding on test prompts, recommendation
//! metrics, CSV reports and SVG charts.

use std::collections::btree_map::{BTreeMap, Entry};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::Dataset;
use crate::draft::DraftModel;
use crate::error::{bail, Error, Result};
use crate::numkit::Rng;
use crate::specdec::{run_session, SessionConfig};
use crate::target::{ArOutput, TargetModel};
use crate::tokenspace::{parse_response, TokenId};

/// Fraction of `truth` items present in `predicted`, duplicates counted once.
pub fn recall_at_10(truth: &[usize], predicted: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut seen = Vec::new();
    for &p in predicted.iter().take(10) {
        if truth.contains(&p) && !seen.contains(&p) {
            seen.push(p);
        }
    }
    seen.len() as f64 / truth.len() as f64
}

/// Binary-relevance NDCG over the first 10 predictions; repeated hits score once.
pub fn ndcg_at_10(truth: &[usize], predicted: &[usize]) -> f64 {
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let ideal: f64 = (0..truth.len().min(10)).map(discount).sum();
    if ideal == 0.0 {
        return 0.0;
    }
    let mut seen = Vec::new();
    let mut dcg = 0.0;
    for (rank, &p) in predicted.iter().take(10).enumerate() {
        if truth.contains(&p) && !seen.contains(&p) {
            seen.push(p);
            dcg += discount(rank);
        }
    }
    dcg / ideal
}

pub const CSV_HEADER: &str = "config_id,seed,ablation,temperature,depth,width,tau,target_calls,draft_calls,committed,\
wall_ms_sd,wall_ms_ar,speedup,recall@10,ndcg@10,flag_rate";

/// One configuration and seed, averaged over prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub config_id: String,
    pub seed: u64,
    pub ablation: String,
    pub temperature: f32,
    pub depth: usize,
    pub width: usize,
    pub tau: f64,
    pub target_calls: f64,
    pub draft_calls: f64,
    pub committed: f64,
    /// Wall times are NaN when timing is disabled.
    pub wall_ms_sd: f64,
    pub wall_ms_ar: f64,
    pub speedup: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub flag_rate: f64,
}

impl BenchRow {
    pub fn is_ar(&self) -> bool {
        self.config_id.starts_with("ar-")
    }

    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6},{:.6}",
            self.config_id,
            self.seed,
            self.ablation,
            self.temperature,
            self.depth,
            self.width,
            self.tau,
            self.target_calls,
            self.draft_calls,
            self.committed,
            self.wall_ms_sd,
            self.wall_ms_ar,
            self.speedup,
            self.recall,
            self.ndcg,
            self.flag_rate
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 16 {
            bail!(Parse, "report row has {} fields, expected 16", f.len());
        }
        fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Parse(format!("bad report value `{s}`")))
        }
        Ok(Self {
            config_id: f[0].to_string(),
            seed: num(f[1])?,
            ablation: f[2].to_string(),
            temperature: num(f[3])?,
            depth: num(f[4])?,
            width: num(f[5])?,
            tau: num(f[6])?,
            target_calls: num(f[7])?,
            draft_calls: num(f[8])?,
            committed: num(f[9])?,
            wall_ms_sd: num(f[10])?,
            wall_ms_ar: num(f[11])?,
            speedup: num(f[12])?,
            recall: num(f[13])?,
            ndcg: num(f[14])?,
            flag_rate: num(f[15])?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            bail!(Parse, "report header does not match");
        }
        let rows = lines.filter(|l| !l.is_empty()).map(BenchRow::from_csv).collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn sd_rows(&self) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(|r| !r.is_ar())
    }
}

pub fn write_report(report: &BenchReport, path: &Path) -> Result<()> {
    if report.rows.is_empty() {
        bail!(Argument, "empty report");
    }
    fs::write(path, report.to_csv())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<BenchReport> {
    BenchReport::from_csv(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub temperature: f32,
    pub depth: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub grid: Vec<GridPoint>,
    pub seeds: Vec<u64>,
    pub max_new: usize,
    /// Untimed sessions run before each timed configuration.
    pub warmups: usize,
    /// When false, wall-clock columns are NaN and the CSV is reproducible.
    pub timing: bool,
    /// Caps the number of test prompts; `None` uses the whole test split.
    pub max_users: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            grid: vec![GridPoint { temperature: 0.0, depth: 6, width: 10 }],
            seeds: vec![0],
            max_new: 60,
            warmups: 3,
            timing: true,
            max_users: None,
        }
    }
}

#[derive(Default)]
struct Tally {
    n: usize,
    tau: f64,
    target_calls: f64,
    draft_calls: f64,
    committed: f64,
    wall_ms: f64,
    recall: f64,
    ndcg: f64,
    flagged: f64,
}

impl Tally {
    fn add_quality(&mut self, ds: &Dataset, user: usize, tokens: &[TokenId]) {
        let parsed = parse_response(tokens, &ds.vocab);
        let items: Vec<usize> = parsed.items.iter().filter_map(|t| ds.catalog.lookup(t)).collect();
        let truth = &ds.users[user].target;
        self.recall += recall_at_10(truth, &items);
        self.ndcg += ndcg_at_10(truth, &items);
        self.flagged += f64::from(u8::from(!parsed.well_formed));
        self.n += 1;
    }

    fn mean(&self, x: f64) -> f64 {
        x / self.n as f64
    }
}

fn label(t: f32) -> String {
    format!("{t}").replace('.', "p")
}

fn session_rng(seed: u64, user: usize) -> Rng {
    Rng::new(seed).fork(user as u64)
}

fn check_compatible(ds: &Dataset, target: &TargetModel, draft: &DraftModel) -> Result<()> {
    if target.config.vocab_size != ds.vocab.size() || draft.config.vocab_size != ds.vocab.size() {
        bail!(Config, "checkpoints do not match the dataset vocabulary of {}", ds.vocab.size());
    }
    if draft.config.d_model != target.config.d_model {
        bail!(Config, "draft width {} does not match target width {}", draft.config.d_model, target.config.d_model);
    }
    Ok(())
}

/// Runs AR and speculative decoding on the same test prompts with matched
/// seeds. Each grid point and seed yields an SD row; each temperature and
/// seed yields one AR row, emitted before its first SD row.
pub fn run_benchmark(ds: &Dataset, target: &TargetModel, draft: &DraftModel, cfg: &BenchConfig) -> Result<BenchReport> {
    check_compatible(ds, target, draft)?;
    let users: Vec<usize> = ds.splits.test.iter().take(cfg.max_users.unwrap_or(usize::MAX)).copied().collect();
    if users.is_empty() || cfg.grid.is_empty() || cfg.seeds.is_empty() {
        bail!(Argument, "benchmark needs test users, grid points and seeds");
    }
    for p in &cfg.grid {
        if p.depth == 0 || p.width == 0 || p.depth > draft.config.depth_rows {
            bail!(Config, "depth {} width {} unsupported by a {}-depth draft", p.depth, p.width, draft.config.depth_rows);
        }
    }
    let ablation = draft.mode.name();
    let mut rows = Vec::new();
    // AR rows keyed by (temperature bits, seed)
    let mut ar_cache: BTreeMap<(u32, u64), (Vec<ArOutput>, f64)> = BTreeMap::new();
    for p in &cfg.grid {
        for &seed in &cfg.seeds {
            let key = (p.temperature.to_bits(), seed);
            if let Entry::Vacant(slot) = ar_cache.entry(key) {
                let mut tally = Tally::default();
                let mut outs = Vec::with_capacity(users.len());
                for _ in 0..cfg.warmups.min(users.len()) {
                    let mut rng = session_rng(seed, users[0]);
                    target.generate_ar(ds.stream(users[0]).prompt(), cfg.max_new, p.temperature, &mut rng)?;
                }
                for &u in &users {
                    let mut rng = session_rng(seed, u);
                    let out = target.generate_ar(ds.stream(u).prompt(), cfg.max_new, p.temperature, &mut rng)?;
                    tally.add_quality(ds, u, &out.tokens);
                    tally.target_calls += out.calls as f64;
                    tally.committed += out.tokens.len() as f64;
                    tally.wall_ms += out.wall.as_secs_f64() * 1e3;
                    outs.push(out);
                }
                let wall = if cfg.timing { tally.mean(tally.wall_ms) } else { f64::NAN };
                rows.push(BenchRow {
                    config_id: format!("ar-t{}", label(p.temperature)),
                    seed,
                    ablation: "none".into(),
                    temperature: p.temperature,
                    depth: 0,
                    width: 0,
                    tau: 1.0,
                    target_calls: tally.mean(tally.target_calls),
                    draft_calls: 0.0,
                    committed: tally.mean(tally.committed),
                    wall_ms_sd: wall,
                    wall_ms_ar: wall,
                    speedup: if cfg.timing { 1.0 } else { f64::NAN },
                    recall: tally.mean(tally.recall),
                    ndcg: tally.mean(tally.ndcg),
                    flag_rate: tally.mean(tally.flagged),
                });
                slot.insert((outs, wall));
            }
            let wall_ar = ar_cache[&key].1;
            let session = SessionConfig { depth: p.depth, width: p.width, temperature: p.temperature, max_new: cfg.max_new };
            for _ in 0..cfg.warmups.min(users.len()) {
                let mut rng = session_rng(seed, users[0]);
                run_session(target, draft, ds.stream(users[0]).prompt(), &session, &mut rng)?;
            }
            let mut tally = Tally::default();
            for &u in &users {
                let mut rng = session_rng(seed, u);
                let rep = run_session(target, draft, ds.stream(u).prompt(), &session, &mut rng)?;
                tally.add_quality(ds, u, &rep.tokens);
                tally.tau += rep.tau();
                tally.target_calls += rep.target_calls() as f64;
                tally.draft_calls += rep.draft_calls() as f64;
                tally.committed += rep.committed() as f64;
                tally.wall_ms += rep.wall.as_secs_f64() * 1e3;
            }
            let wall_sd = if cfg.timing { tally.mean(tally.wall_ms) } else { f64::NAN };
            rows.push(BenchRow {
                config_id: format!("{ablation}-t{}-b{}-w{}", label(p.temperature), p.depth, p.width),
                seed,
                ablation: ablation.to_string(),
                temperature: p.temperature,
                depth: p.depth,
                width: p.width,
                tau: tally.mean(tally.tau),
                target_calls: tally.mean(tally.target_calls),
                draft_calls: tally.mean(tally.draft_calls),
                committed: tally.mean(tally.committed),
                wall_ms_sd: wall_sd,
                wall_ms_ar: wall_ar,
                speedup: wall_ar / wall_sd,
                recall: tally.mean(tally.recall),
                ndcg: tally.mean(tally.ndcg),
                flag_rate: tally.mean(tally.flagged),
            });
        }
    }
    Ok(BenchReport { rows })
}

pub const SWEEP_DEPTHS: [usize; 7] = [1, 2, 4, 6, 8, 10, 12];

/// Greedy benchmark at width 10 over several test depths.
pub fn depth_sweep(
    ds: &Dataset,
    target: &TargetModel,
    draft: &DraftModel,
    depths: &[usize],
    base: &BenchConfig,
) -> Result<BenchReport> {
    if let Some(&d) = depths.iter().find(|&&d| d > draft.config.depth_rows) {
        bail!(Config, "test depth {d} exceeds the draft's {} depth embeddings", draft.config.depth_rows);
    }
    let grid = depths.iter().map(|&depth| GridPoint { temperature: 0.0, depth, width: 10 }).collect();
    run_benchmark(ds, target, draft, &BenchConfig { grid, ..base.clone() })
}

struct Series<'a> {
    name: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let y1 = if y1 > 0.0 { y1 * 1.1 } else { 1.0 };
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / y1 * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for i in 0..=4 {
        let v = y1 * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{v:.2}</text>"#, pad - 6.0, sy(v) + 4.0);
    }
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{x}</text>"#, sx(x), h - pad + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, w / 2.0, h - 14.0, escape(x_label));
    for (i, ser) in series.iter().enumerate() {
        let path: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#, ser.color, path.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#, sx(x), sy(y), ser.color);
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly:.1}" font-size="12" fill="{}">{}</text>"#,
            w - pad - 80.0,
            ser.color,
            escape(ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes one τ/speedup-versus-depth chart per (ablation, temperature, width,
/// seed) group of SD rows and returns the file paths.
pub fn plot(report: &BenchReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        bail!(Argument, "empty report");
    }
    fs::create_dir_all(dir)?;
    let mut groups: BTreeMap<(String, String, usize, u64), Vec<&BenchRow>> = BTreeMap::new();
    for r in report.sd_rows() {
        groups.entry((r.ablation.clone(), label(r.temperature), r.width, r.seed)).or_default().push(r);
    }
    let mut paths = Vec::new();
    for ((ablation, temp, width, seed), mut rows) in groups {
        rows.sort_by_key(|r| r.depth);
        let finite = |v: f64| v.is_finite();
        let series = [
            Series { name: "tau", color: "#1f77b4", points: rows.iter().map(|r| (r.depth as f64, r.tau)).collect() },
            Series {
                name: "speedup",
                color: "#d62728",
                points: rows.iter().filter(|r| finite(r.speedup)).map(|r| (r.depth as f64, r.speedup)).collect(),
            },
        ];
        let title = format!("{ablation} T={} w={width} seed {seed}", temp.replace('p', "."));
        let path = dir.join(format!("depth_{ablation}_t{temp}_w{width}_s{seed}.svg"));
        fs::write(&path, line_chart(&title, "speculation depth", &series))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal() -> f64 {
        (1..=10).map(|i| 1.0 / ((i + 1) as f64).log2()).sum()
    }

    #[test]
    fn recall_examples() {
        let g: Vec<usize> = (0..10).collect();
        assert_eq!(recall_at_10(&g, &g), 1.0);
        assert_eq!(recall_at_10(&g, &[0, 1, 2, 3, 4, 50, 51, 52, 53, 54]), 0.5);
        assert_eq!(recall_at_10(&g, &[3; 10]), 0.1);
        assert_eq!(recall_at_10(&g, &[]), 0.0);
    }

    #[test]
    fn ndcg_examples() {
        let g: Vec<usize> = (0..10).collect();
        assert!((ideal() - 4.5436).abs() < 1e-4);
        assert_eq!(ndcg_at_10(&g, &g), 1.0);
        let single = ndcg_at_10(&g, &[7, 90, 91, 92, 93, 94, 95, 96, 97, 98]);
        assert!((single - 1.0 / ideal()).abs() < 1e-12);
        assert!((single - 0.2201).abs() < 1e-4);
        assert_eq!(ndcg_at_10(&g, &[]), 0.0);
        // a repeated hit counts at its first rank only
        assert_eq!(ndcg_at_10(&g, &[7, 7, 7]), single);
    }

    #[test]
    fn report_round_trips_through_csv() {
        let row = BenchRow {
            config_id: "full-t0p5-b6-w10".into(),
            seed: 3,
            ablation: "full".into(),
            temperature: 0.5,
            depth: 6,
            width: 10,
            tau: 3.25,
            target_calls: 16.0,
            draft_calls: 96.0,
            committed: 52.0,
            wall_ms_sd: f64::NAN,
            wall_ms_ar: f64::NAN,
            speedup: f64::NAN,
            recall: 0.4,
            ndcg: 0.3,
            flag_rate: 0.0,
        };
        let report = BenchReport { rows: vec![row] };
        let csv = report.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        let back = BenchReport::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert!(BenchReport::from_csv("a,b\n").is_err());
    }

    #[test]
    fn charts_are_well_formed() {
        let mk = |depth: usize, tau: f64| BenchRow {
            config_id: format!("full-t0-b{depth}-w10"),
            seed: 0,
            ablation: "full".into(),
            temperature: 0.0,
            depth,
            width: 10,
            tau,
            target_calls: 10.0,
            draft_calls: 10.0,
            committed: 30.0,
            wall_ms_sd: 2.0,
            wall_ms_ar: 3.0,
            speedup: 1.5,
            recall: 0.0,
            ndcg: 0.0,
            flag_rate: 0.0,
        };
        let ar = BenchRow { config_id: "ar-t0".into(), ablation: "none".into(), depth: 0, width: 0, ..mk(0, 1.0) };
        let report = BenchReport { rows: vec![ar, mk(1, 1.8), mk(2, 2.4), mk(4, 3.0)] };
        assert!(report.rows[0].is_ar());
        assert_eq!(report.sd_rows().count(), 3);
        let dir = tempfile::tempdir().unwrap();
        let paths = plot(&report, dir.path()).unwrap();
        assert_eq!(paths.len(), 1);
        let text = fs::read_to_string(&paths[0]).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        let lines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
        assert_eq!(lines, 2);
    }
}
