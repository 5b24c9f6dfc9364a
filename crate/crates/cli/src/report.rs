//! Evaluation over image sets: per-image RD points from real bitstreams,
//! RD plots, skip-ratio and complexity tables, attention-map dumps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use lic_autodiff::{Graph, Tensor};
use lic_core::checkpoint::load_model;
use lic_core::coding::codec::{analyse, decode_bytes, encode_latents, EncodeHandler, EncodeOptions};
use lic_core::config::CodecConfig;
use lic_core::context::mean_attention_weights;
use lic_core::image_io::{load_image, pad_reflect};
use lic_core::metrics::{ms_ssim, psnr, PSNR_CAP};
use lic_core::model::{run_schedule, Model, SPATIAL_MULTIPLE};
use lic_core::nn_blocks::{count_macs, BlockSpec};
use lic_core::params::Bound;
use lic_core::refine::{refine, RefineConfig};
use plotters::prelude::*;
use serde::Serialize;

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub selective: bool,
    pub bucketed: bool,
    /// Refinement steps; 0 disables refinement.
    pub refine_steps: usize,
    pub refine_lr: f64,
}

/// One image coded at one operating point.
#[derive(Clone, Debug, Serialize)]
pub struct ImageRow {
    pub checkpoint: String,
    pub lambda_index: usize,
    pub image: String,
    pub bytes: usize,
    pub bpp: f64,
    pub psnr_db: f64,
    pub msssim: f64,
    pub encode_s: f64,
    pub decode_s: f64,
    pub skip_ratio: f64,
    /// Decoder reproduced the encoder's latents, skip maps and reconstruction.
    pub conformant: bool,
}

/// Codes `x` (`[1,3,H,W]`) and decodes the bytes again. Returns the row and
/// the per-slice skip ratios.
pub fn evaluate_image(model: &Model, x: &Tensor, name: &str, opts: EvalOptions) -> anyhow::Result<(ImageRow, Vec<f64>)> {
    let (_, _, h, w) = x.dims4()?;
    let t0 = Instant::now();
    let padded = pad_reflect(x, SPATIAL_MULTIPLE)?;
    let mut lat = analyse(model, &padded)?;
    let refined = opts.refine_steps > 0 && model.cfg.ablation.ilr;
    if refined {
        let rc = RefineConfig { steps: opts.refine_steps, lr: opts.refine_lr, ..RefineConfig::default() };
        lat = refine(model, &padded, &lat, (h, w), &rc)?.latents;
    }
    let enc = encode_latents(model, &lat, h, w, EncodeOptions { selective: opts.selective, bucketed: opts.bucketed }, refined)?;
    let encode_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let dec = decode_bytes(model, &enc.bytes)?;
    let decode_s = t1.elapsed().as_secs_f64();
    let conformant = dec.yhat == enc.yhat && dec.x_hat == enc.x_hat && dec.skip == enc.skip;
    let skip: Vec<f64> = dec
        .skip
        .iter()
        .map(|s| s.data().iter().filter(|&&v| v == 0.0).count() as f64 / s.numel().max(1) as f64)
        .collect();
    let skip_ratio = if skip.is_empty() { 0.0 } else { skip.iter().sum::<f64>() / skip.len() as f64 };
    let msssim = if h >= 16 && w >= 16 { ms_ssim(x, &dec.x_hat)? } else { f64::NAN };
    let row = ImageRow {
        checkpoint: String::new(),
        lambda_index: model.cfg.lambda_index,
        image: name.to_string(),
        bytes: enc.bytes.len(),
        bpp: enc.bytes.len() as f64 * 8.0 / (h * w) as f64,
        psnr_db: psnr(x, &dec.x_hat)?.min(PSNR_CAP),
        msssim,
        encode_s,
        decode_s,
        skip_ratio,
        conformant,
    };
    Ok((row, skip))
}

pub struct ReportSummary {
    pub rows: Vec<ImageRow>,
    /// Checkpoints that could not be loaded.
    pub absent: Vec<PathBuf>,
    pub files: Vec<PathBuf>,
}

impl ReportSummary {
    pub fn conformance_failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.conformant).count()
    }
}

fn image_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| ["png", "ppm", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    v.sort();
    Ok(v)
}

/// Evaluates every checkpoint on every image of `data_dir` and writes
/// `rd_points.csv`, `rd_curve.svg`, `skip_ratios.csv` and
/// `complexity.md` into `out_dir`.
pub fn report(checkpoints: &[PathBuf], data_dir: &Path, out_dir: &Path, opts: EvalOptions) -> anyhow::Result<ReportSummary> {
    fs::create_dir_all(out_dir)?;
    let images = image_files(data_dir)?;
    let mut rows = Vec::new();
    let mut absent = Vec::new();
    let mut skip_table: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut cfg_seen: Option<CodecConfig> = None;
    for ck in checkpoints {
        let model = match load_model(ck) {
            Ok((m, _)) => m,
            Err(e) => {
                log::warn!("checkpoint {} absent: {e}", ck.display());
                absent.push(ck.clone());
                continue;
            }
        };
        let label = ck.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut slice_sum = vec![0.0; model.cfg.num_slices];
        let (mut sum_bpp, mut sum_psnr) = (0.0, 0.0);
        for path in &images {
            let x = match load_image(path) {
                Ok(x) => x,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let (mut row, skip) = evaluate_image(&model, &x, &name, opts)?;
            row.checkpoint = label.clone();
            for (a, b) in slice_sum.iter_mut().zip(&skip) {
                *a += b;
            }
            sum_bpp += row.bpp;
            sum_psnr += row.psnr_db;
            rows.push(row);
        }
        let n = images.len().max(1) as f64;
        skip_table.push((model.cfg.lambda_index, slice_sum.iter().map(|v| v / n).collect()));
        let key = format!("{} ({:?})", model.cfg.name, model.cfg.metric);
        let point = (sum_bpp / n, sum_psnr / n);
        match curves.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push(point),
            None => curves.push((key, vec![point])),
        }
        cfg_seen.get_or_insert(model.cfg.clone());
    }
    let mut files = Vec::new();

    let csv_path = out_dir.join("rd_points.csv");
    let mut wr = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    files.push(csv_path);

    let plot = out_dir.join("rd_curve.svg");
    write_rd_plot(&plot, &curves, "bpp", "PSNR (dB)")?;
    files.push(plot);

    let skip_path = out_dir.join("skip_ratios.csv");
    let mut wr = csv::Writer::from_path(&skip_path)?;
    let slices = skip_table.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut head = vec!["lambda_index".to_string()];
    head.extend((0..slices).map(|i| format!("slice_{i}")));
    head.push("mean".into());
    wr.write_record(&head)?;
    for (q, v) in &skip_table {
        let mut rec = vec![q.to_string()];
        rec.extend(v.iter().map(|r| format!("{r:.4}")));
        rec.resize(slices + 1, String::new());
        rec.push(format!("{:.4}", v.iter().sum::<f64>() / v.len().max(1) as f64));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    files.push(skip_path);

    if let Some(cfg) = cfg_seen {
        let path = out_dir.join("complexity.md");
        fs::write(&path, complexity_summary(&cfg)?)?;
        files.push(path);
    }
    if !absent.is_empty() {
        let path = out_dir.join("absent.txt");
        let list: Vec<String> = absent.iter().map(|p| p.display().to_string()).collect();
        fs::write(&path, list.join("\n") + "\n")?;
        files.push(path);
    }
    Ok(ReportSummary { rows, absent, files })
}

/// One polyline per curve, points sorted by rate.
pub fn write_rd_plot(path: &Path, curves: &[(String, Vec<(f64, f64)>)], xlabel: &str, ylabel: &str) -> anyhow::Result<()> {
    let all: Vec<(f64, f64)> = curves.iter().flat_map(|(_, p)| p.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 1.0f64, 0.0f64, 1.0f64);
    if !all.is_empty() {
        x0 = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        x1 = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        y0 = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        y1 = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    }
    let pad = |a: f64, b: f64| {
        let m = ((b - a) * 0.1).max(1e-3);
        (a - m, b + m)
    };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc(xlabel)
        .y_desc(ylabel)
        .draw()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    for (i, (name, pts)) in curves.iter().enumerate() {
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let colour = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.clone(), colour.stroke_width(2)))
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, colour.filled())))
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(())
}

/// Parameter counts per module group, transform MACs and the token-mixing
/// block ratio, as markdown.
pub fn complexity_summary(cfg: &CodecConfig) -> anyhow::Result<String> {
    let model = Model::layout(cfg.clone())?;
    let groups = ["g_a.", "g_s.", "h_a.", "h_s.", "prior.", "ctx.", "ep.", "lrp.", "skip."];
    let mut out = format!("# Complexity: {}\n\n| module | parameters |\n|---|---:|\n", cfg.name);
    for g in groups {
        out += &format!("| {} | {} |\n", g.trim_end_matches('.'), model.store.num_scalars_with_prefix(g));
    }
    let total = model.num_params();
    out += &format!("| total | {total} ({:.2}M) |\n\n", total as f64 / 1e6);
    let (h, w) = (512, 768);
    let macs = model.transform_macs(h, w);
    out += &format!("Transform MACs at {w}x{h}: {macs} ({:.2} kMAC/pixel)\n\n", macs as f64 / (h * w) as f64 / 1e3);
    let c = cfg.n;
    let stm = count_macs(BlockSpec::StmX2, c, 16, 16);
    let res = count_macs(BlockSpec::ResidualBlock3x3x2, c, 16, 16);
    out += &format!("Two token-mixing blocks vs one 3x3x2 residual block at c={c}: {:.4}\n", stm as f64 / res as f64);
    Ok(out)
}

fn heat_png(path: &Path, m: &[f64], rows: usize, cols: usize, cell: u32) -> anyhow::Result<()> {
    let max = m.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let img = image::RgbImage::from_fn(cols as u32 * cell, rows as u32 * cell, |x, y| {
        let v = (m[(y / cell) as usize * cols + (x / cell) as usize] / max).clamp(0.0, 1.0);
        let t = (v * 255.0).round() as u8;
        image::Rgb([t, (t as f64 * 0.6) as u8, 255 - t])
    });
    img.save(path)?;
    Ok(())
}

/// Runs the entropy model on `x` and writes each reweighting module's
/// channel-attention map (`*_map.png`), its mean attention weights
/// (`*_maw.png`) and `maw.csv`.
pub fn dump_attention(model: &Model, x: &Tensor, out_dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let padded = pad_reflect(x, SPATIAL_MULTIPLE)?;
    let lat = analyse(model, &padded)?;
    let g = Graph::inference();
    let p = Bound::new(&g, &model.store);
    p.enable_attention_log();
    let hyper = model.h_s.forward(&p, g.constant(lat.z.map(f64::round)))?;
    let mut handler = EncodeHandler::new(&lat.y, model.cfg.num_slices, false, false)?;
    run_schedule(model, &p, hyper, false, &mut handler)?;
    let mut files = Vec::new();
    let mut csv = csv::Writer::from_path(out_dir.join("maw.csv"))?;
    csv.write_record(["module", "channel", "weight"])?;
    for (name, map) in p.take_attention_log() {
        let s = map.shape().to_vec();
        let c = s[s.len() - 1];
        let first = Tensor::from_vec(&[c, c], map.data()[..c * c].to_vec());
        let maw = mean_attention_weights(&first)?;
        let stem = name.replace('.', "_");
        let mp = out_dir.join(format!("{stem}_map.png"));
        heat_png(&mp, first.data(), c, c, 8)?;
        let wp = out_dir.join(format!("{stem}_maw.png"));
        heat_png(&wp, &maw, 1, c, 16)?;
        for (i, v) in maw.iter().enumerate() {
            csv.write_record([name.clone(), i.to_string(), format!("{v:.6}")])?;
        }
        files.push(mp);
        files.push(wp);
    }
    csv.flush()?;
    files.push(out_dir.join("maw.csv"));
    Ok(files)
}
