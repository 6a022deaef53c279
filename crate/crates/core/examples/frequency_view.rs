//! Decomposes a synthetic image with a horizontal edge, shows where the
//! detail energy lands, writes the normalized frequency view as a PNG and
//! runs the dual-stream fusion with a toy embedding.

use holofair::freqview::{
    dwt2_db4, frequency_view, grayscale, idwt2_db4, Boundary, FusedPipeline, ImagePlane, ImageStack,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (w, h) = (96, 64);
    let red = ImagePlane::from_fn(w, h, |_, y| if y < h / 2 { 0.9 } else { 0.1 });
    let green = ImagePlane::from_fn(w, h, |x, _| x as f64 / w as f64);
    let blue = ImagePlane::filled(w, h, 0.5);
    let image = ImageStack::new(vec![red, green, blue])?;
    let gray = grayscale(&image)?;

    for boundary in [Boundary::Symmetric, Boundary::Periodization] {
        let bands = dwt2_db4(&gray, boundary)?;
        let back = idwt2_db4(&bands);
        println!(
            "{boundary:?}: bands {}x{}  energy cA {:.3} cH {:.3} cV {:.3} cD {:.3}  reconstruction error {:.1e}",
            bands.ca.width,
            bands.ca.height,
            bands.ca.energy(),
            bands.ch.energy(),
            bands.cv.energy(),
            bands.cd.energy(),
            back.max_abs_diff(&gray)
        );
    }

    let view = frequency_view(&gray, Boundary::Symmetric)?;
    let path = std::env::temp_dir().join("frequency_view.png");
    view.write_png(&path)?;
    println!("wrote {} {:?}", path.display(), view.shape());

    let channel_means = |s: &ImageStack| -> Vec<f64> {
        s.channels
            .iter()
            .map(|c| c.pixels.iter().sum::<f64>() / c.pixels.len() as f64)
            .collect()
    };
    let pipeline = FusedPipeline::new(channel_means);
    for pair in pipeline.run(&[image])? {
        println!("alpha {:.2}  f_s {:.3?}  f_w {:.3?}", pipeline.gate.alpha(), pair.f_s, pair.f_w);
        println!("z {:.3?}", pair.z);
    }
    Ok(())
}
