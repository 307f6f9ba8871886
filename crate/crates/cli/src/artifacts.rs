//! Run directories, CSV tables, PGM images and line plots.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use bridgeprompt::checkpoint::checksum;
use bridgeprompt::numerics::Tensor;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-", env!("BRIDGEPROMPT_GIT_DESCRIBE"));

/// Output directory for one command. Every file written through it is
/// listed with its checksum in `manifest.csv` by [`RunDir::finish`].
pub struct RunDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl RunDir {
    /// Refuses a non-empty directory unless `force`, in which case it is
    /// cleared first.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            let occupied = fs::read_dir(root)
                .with_context(|| format!("cannot list {}", root.display()))?
                .next()
                .is_some();
            if occupied {
                if !force {
                    bail!(
                        "run directory {} already exists and is not empty (pass --force to replace it)",
                        root.display()
                    );
                }
                fs::remove_dir_all(root).with_context(|| format!("cannot clear {}", root.display()))?;
            }
        }
        fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for `rel`, creating parent directories and recording it.
    pub fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(PathBuf::from(rel));
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }

    pub fn csv(&mut self, rel: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let p = self.path(rel)?;
        write_csv(&p, header, rows)?;
        Ok(p)
    }

    pub fn pgm(&mut self, rel: &str, image: &GrayImage) -> Result<PathBuf> {
        let p = self.path(rel)?;
        write_pgm(&p, image)?;
        Ok(p)
    }

    /// Writes the config echo and run record, then `manifest.csv` with a
    /// checksum for every file written so far.
    pub fn finish(mut self, command: &str, config_source: &str, seeds: &[(&str, u64)]) -> Result<PathBuf> {
        self.write("config.toml", config_source.as_bytes())?;
        let mut run = format!("version = \"{VERSION}\"\ncommand = \"{command}\"\n");
        for (name, seed) in seeds {
            run.push_str(&format!("{name} = {seed}\n"));
        }
        self.write("run.toml", run.as_bytes())?;
        let mut rows = Vec::new();
        let mut files = self.written.clone();
        files.sort();
        files.dedup();
        for rel in files {
            let bytes = fs::read(self.root.join(&rel))?;
            rows.push(vec![rel.to_string_lossy().into_owned(), hex(checksum(&bytes))]);
        }
        let manifest = self.root.join("manifest.csv");
        write_csv(&manifest, &["file", "checksum"], &rows)?;
        Ok(manifest)
    }
}

pub fn hex(v: u64) -> String {
    format!("{v:016x}")
}

pub fn file_checksum(path: &Path) -> Result<u64> {
    Ok(checksum(&fs::read(path).with_context(|| format!("cannot read {}", path.display()))?))
}

/// Shortest round-trip decimal form; `inf`/`-inf`/`NaN` for non-finite values.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        ensure!(row.len() == header.len(), "csv row has {} cells, header {}", row.len(), header.len());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Flattened square image in `[0, 1]` to 8-bit gray, clamping out-of-range values.
pub fn to_image(t: &Tensor) -> Result<GrayImage> {
    let side = (t.len() as f64).sqrt().round() as usize;
    ensure!(side * side == t.len(), "tensor of {} values is not a square image", t.len());
    let bytes = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage::from_raw(side as u32, side as u32, bytes).expect("side² bytes"))
}

pub fn from_image(img: &GrayImage) -> Tensor {
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Tensor::vector(data).expect("finite pixels")
}

/// Binary (P5) graymap.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .with_context(|| format!("cannot read image {}", path.display()))?
        .into_luma8())
}

/// A few line series drawn on a white canvas with a black frame. Series
/// get successively lighter grays.
pub fn line_plot(series: &[Vec<(f64, f64)>], width: u32, height: u32) -> GrayImage {
    let mut img = GrayImage::from_pixel(width, height, Luma([255]));
    let margin = 8u32;
    for x in margin..width - margin {
        img.put_pixel(x, height - margin, Luma([0]));
        img.put_pixel(x, margin, Luma([0]));
    }
    for y in margin..=height - margin {
        img.put_pixel(margin, y, Luma([0]));
        img.put_pixel(width - margin, y, Luma([0]));
    }
    let points = series.iter().flatten().filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0 < x1) {
        return img;
    }
    if !(y0 < y1) {
        (y0, y1) = (y0 - 1.0, y1 + 1.0);
    }
    let inner_w = (width - 2 * margin - 2) as f64;
    let inner_h = (height - 2 * margin - 2) as f64;
    let to_px = |(x, y): (f64, f64)| {
        let px = margin as f64 + 1.0 + (x - x0) / (x1 - x0) * inner_w;
        let py = (height - margin) as f64 - 1.0 - (y - y0) / (y1 - y0) * inner_h;
        (px.round() as i64, py.round() as i64)
    };
    for (i, s) in series.iter().enumerate() {
        let shade = Luma([(i as u32 * 70).min(180) as u8]);
        let finite: Vec<(i64, i64)> = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).map(to_px).collect();
        for w in finite.windows(2) {
            draw_line(&mut img, w[0], w[1], shade);
        }
        if let [only] = finite[..] {
            img.put_pixel(only.0 as u32, only.1 as u32, shade);
        }
    }
    img
}

fn draw_line(img: &mut GrayImage, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), shade: Luma<u8>) {
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let (sx, sy) = ((x1 - x).signum(), (y1 - y).signum());
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, shade);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Mean of consecutive windows, for plotting long noisy curves.
pub fn smooth(values: &[f64], window: usize) -> Vec<(f64, f64)> {
    let w = window.max(1);
    values
        .chunks(w)
        .enumerate()
        .map(|(i, c)| ((i * w) as f64 + c.len() as f64 / 2.0, c.iter().sum::<f64>() / c.len() as f64))
        .collect()
}
