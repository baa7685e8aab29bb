//! Color-coded phase ribbons: ground truth bar above, prediction bar below.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthgen::PhaseLabel;

pub const BAR_HEIGHT: usize = 16;
pub const GAP: usize = 4;
pub const RIBBON_HEIGHT: usize = 2 * BAR_HEIGHT + GAP;
const GAP_COLOR: [u8; 3] = [255, 255, 255];

pub fn phase_color(phase: PhaseLabel) -> [u8; 3] {
    match phase {
        PhaseLabel::Preparing => [31, 119, 180],
        PhaseLabel::Knotting => [255, 127, 14],
        PhaseLabel::Resecting => [44, 160, 44],
        PhaseLabel::Releasing => [214, 39, 40],
        PhaseLabel::Postprocessing => [148, 103, 189],
    }
}

fn color_phase(rgb: [u8; 3]) -> Option<PhaseLabel> {
    PhaseLabel::ALL.into_iter().find(|&p| phase_color(p) == rgb)
}

/// Palette description stored in the PNG header.
pub fn palette_text() -> String {
    PhaseLabel::ALL
        .iter()
        .map(|&p| {
            let [r, g, b] = phase_color(p);
            format!("{}=#{r:02x}{g:02x}{b:02x}", p.name())
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Writes the ribbon PNG and a CSV of `index,label,prediction` next to it.
pub fn export_ribbon(labels: &[PhaseLabel], preds: &[PhaseLabel], png_path: &Path, csv_path: &Path) -> Result<()> {
    if labels.len() != preds.len() {
        return Err(Error::Input(format!(
            "{} labels but {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("cannot draw an empty ribbon".into()));
    }
    write_csv(labels, preds, csv_path)?;
    write_png(labels, preds, png_path)
}

fn write_csv(labels: &[PhaseLabel], preds: &[PhaseLabel], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "index,label,prediction").map_err(io)?;
    for (i, (l, p)) in labels.iter().zip(preds).enumerate() {
        writeln!(w, "{i},{},{}", l.name(), p.name()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn write_png(labels: &[PhaseLabel], preds: &[PhaseLabel], path: &Path) -> Result<()> {
    let width = labels.len();
    let mut pixels = Vec::with_capacity(width * RIBBON_HEIGHT * 3);
    for row in 0..RIBBON_HEIGHT {
        for x in 0..width {
            let rgb = if row < BAR_HEIGHT {
                phase_color(labels[x])
            } else if row < BAR_HEIGHT + GAP {
                GAP_COLOR
            } else {
                phase_color(preds[x])
            };
            pixels.extend_from_slice(&rgb);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, RIBBON_HEIGHT as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Internal(format!("encoding {}: {e}", path.display()));
    enc.add_text_chunk("Palette".into(), palette_text()).map_err(png_err)?;
    enc.add_text_chunk(
        "Layout".into(),
        format!("top {BAR_HEIGHT}px ground truth, {GAP}px gap, bottom {BAR_HEIGHT}px prediction; one column per frame"),
    )
    .map_err(png_err)?;
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Decodes a ribbon PNG back into `(labels, predictions)`.
pub fn read_ribbon(path: &Path) -> Result<(Vec<PhaseLabel>, Vec<PhaseLabel>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let bad = |msg: String| Error::data_format(path, msg);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(bad("ribbon must be 8-bit RGB".into()));
    }
    if info.height as usize != RIBBON_HEIGHT {
        return Err(bad(format!("ribbon height {} != {RIBBON_HEIGHT}", info.height)));
    }
    let width = info.width as usize;
    let row = |y: usize| -> Result<Vec<PhaseLabel>> {
        (0..width)
            .map(|x| {
                let o = (y * width + x) * 3;
                let rgb = [buf[o], buf[o + 1], buf[o + 2]];
                color_phase(rgb).ok_or_else(|| bad(format!("pixel ({x}, {y}) is not a palette color")))
            })
            .collect()
    };
    Ok((row(0)?, row(BAR_HEIGHT + GAP)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use PhaseLabel::*;

    #[test]
    fn round_trip_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec![Preparing, Knotting, Knotting, Resecting, Releasing, Postprocessing];
        let preds = vec![Preparing, Knotting, Resecting, Resecting, Releasing, Releasing];
        let png_path = dir.path().join("r.png");
        let csv_path = dir.path().join("r.csv");
        export_ribbon(&labels, &preds, &png_path, &csv_path).unwrap();
        assert_eq!(read_ribbon(&png_path).unwrap(), (labels.clone(), preds));
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), labels.len() + 1);
    }

    #[test]
    fn perfect_predictions_give_identical_bars() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec![Knotting, Resecting, Releasing];
        let p = dir.path().join("p.png");
        export_ribbon(&labels, &labels, &p, &dir.path().join("p.csv")).unwrap();
        let (l, q) = read_ribbon(&p).unwrap();
        assert_eq!(l, q);
    }

    #[test]
    fn palette_colors_are_distinct() {
        for a in PhaseLabel::ALL {
            for b in PhaseLabel::ALL {
                assert_eq!(a == b, phase_color(a) == phase_color(b));
            }
            assert_ne!(phase_color(a), GAP_COLOR);
        }
    }
}
