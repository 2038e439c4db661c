use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::latent::EditKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub instance_id: String,
    pub class_label: String,
    pub instruction: String,
    pub kind: EditKind,
    pub clip_sim: f64,
    pub clip_dir: f64,
    /// Only computed for global edits.
    pub structure_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub clip_sim: f64,
    pub clip_dir: f64,
    pub structure_distance: Option<f64>,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairResult>,
    pub aggregate: Aggregate,
    /// Aggregates split by edit kind, keyed "global" and "local".
    pub by_kind: std::collections::BTreeMap<String, Aggregate>,
    pub views: usize,
    pub resolution: usize,
    pub model_hash: String,
    pub config_hash: String,
    pub embedder: String,
    pub backbone: String,
}

fn aggregate<'a>(pairs: impl Iterator<Item = &'a PairResult> + Clone) -> Aggregate {
    let n = pairs.clone().count();
    let mean = |f: &dyn Fn(&PairResult) -> f64| pairs.clone().map(f).sum::<f64>() / n.max(1) as f64;
    let structure: Vec<f64> = pairs.clone().filter_map(|p| p.structure_distance).collect();
    Aggregate {
        clip_sim: mean(&|p| p.clip_sim),
        clip_dir: mean(&|p| p.clip_dir),
        structure_distance: (!structure.is_empty()).then(|| structure.iter().sum::<f64>() / structure.len() as f64),
        n_pairs: n,
    }
}

impl EvalReport {
    pub fn new(
        pairs: Vec<PairResult>,
        views: usize,
        resolution: usize,
        model_hash: String,
        config_hash: String,
        embedder: String,
        backbone: String,
    ) -> Self {
        let mut by_kind = std::collections::BTreeMap::new();
        for (name, kind) in [("global", EditKind::Global), ("local", EditKind::Local)] {
            let it = pairs.iter().filter(move |p| p.kind == kind);
            if it.clone().next().is_some() {
                by_kind.insert(name.to_string(), aggregate(it));
            }
        }
        Self {
            aggregate: aggregate(pairs.iter()),
            by_kind,
            pairs,
            views,
            resolution,
            model_hash,
            config_hash,
            embedder,
            backbone,
        }
    }

    pub fn is_finite(&self) -> bool {
        let a = &self.aggregate;
        a.clip_sim.is_finite() && a.clip_dir.is_finite() && a.structure_distance.is_none_or(f64::is_finite)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["instance_id", "class_label", "instruction", "kind", "clip_sim", "clip_dir", "structure_distance"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.pairs {
            let kind = match p.kind {
                EditKind::Global => "global",
                EditKind::Local => "local",
            };
            w.write_record([
                p.instance_id.as_str(),
                &p.class_label,
                &p.instruction,
                kind,
                &p.clip_sim.to_string(),
                &p.clip_dir.to_string(),
                &opt(p.structure_distance),
            ])
            .map_err(csv_err)?;
        }
        let a = &self.aggregate;
        w.write_record(["mean", "", "", "", &a.clip_sim.to_string(), &a.clip_dir.to_string(), &opt(a.structure_distance)])
            .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `report.json`, `report.csv` and one bar chart per metric.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(self)?.as_bytes())?;
        write_atomic(&dir.join("report.csv"), self.to_csv()?.as_bytes())?;
        let labels: Vec<String> = self.pairs.iter().map(|p| format!("{} | {}", p.instance_id, p.instruction)).collect();
        let metrics: [(&str, Vec<Option<f64>>); 3] = [
            ("clip_sim", self.pairs.iter().map(|p| Some(p.clip_sim)).collect()),
            ("clip_dir", self.pairs.iter().map(|p| Some(p.clip_dir)).collect()),
            ("structure_distance", self.pairs.iter().map(|p| p.structure_distance).collect()),
        ];
        for (name, values) in metrics {
            write_atomic(&dir.join(format!("{name}.svg")), bar_chart_svg(name, &labels, &values).as_bytes())?;
        }
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Horizontal bar chart; missing values are drawn as "n/a".
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[Option<f64>]) -> String {
    const ROW: f64 = 22.0;
    const LEFT: f64 = 320.0;
    const WIDTH: f64 = 360.0;
    let lo = values.iter().flatten().fold(0.0f64, |m, &v| m.min(v));
    let hi = values.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |v: f64| LEFT + (v - lo) / span * WIDTH;
    let height = 40.0 + ROW * labels.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        LEFT + WIDTH + 80.0
    );
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(s, r#"<line x1="{0}" y1="30" x2="{0}" y2="{1}" stroke="black"/>"#, x(0.0), height - 10.0);
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let y = 35.0 + ROW * i as f64;
        let _ = writeln!(s, r#"<text x="10" y="{}">{}</text>"#, y + 14.0, escape(label));
        match v {
            Some(v) => {
                let (a, b) = (x(0.0).min(x(*v)), x(0.0).max(x(*v)));
                let _ = writeln!(
                    s,
                    r##"<rect x="{a:.2}" y="{y}" width="{:.2}" height="{}" fill="#4c72b0"/><text x="{:.2}" y="{}">{v:.4}</text>"##,
                    (b - a).max(0.5),
                    ROW - 6.0,
                    b + 4.0,
                    y + 14.0
                );
            }
            None => {
                let _ = writeln!(s, r#"<text x="{:.2}" y="{}" fill="gray">n/a</text>"#, x(0.0) + 4.0, y + 14.0);
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
