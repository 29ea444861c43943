//! Render every identity on every background into one contact sheet, plus
//! the control maps of one clip per motion.
//!
//! cargo run --example sprite_gallery -- [out.png] [resolution]

use anchorframe::data::sprite::{render_sprite, Motion, Pose, SpriteIdentity, NUM_BACKGROUNDS};

fn main() -> anchorframe::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).cloned().unwrap_or_else(|| "sprite_gallery.png".into());
    let res: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let roster = SpriteIdentity::roster(16);
    let frames = 8;
    let rows = NUM_BACKGROUNDS + Motion::ALL.len() * 2;
    let cols = roster.len().max(frames);
    let mut sheet = image::RgbImage::new((cols * res) as u32, (rows * res) as u32);
    let mut blit = |img: &anchorframe::nn::Tensor<f64>, row: usize, col: usize| {
        let ch = img.dim(0);
        for y in 0..res {
            for x in 0..res {
                let px = |c: usize| (img.data()[(c.min(ch - 1) * res + y) * res + x] * 255.0).round() as u8;
                sheet.put_pixel((col * res + x) as u32, (row * res + y) as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    };
    for bg in 0..NUM_BACKGROUNDS {
        for (i, id) in roster.iter().enumerate() {
            blit(&render_sprite(id, &Pose::default(), bg, res).image, bg, i);
        }
    }
    for (m, motion) in Motion::ALL.iter().enumerate() {
        for (f, pose) in motion.trace(frames, 0.0).iter().enumerate() {
            let r = render_sprite(&roster[m * 3], pose, m % NUM_BACKGROUNDS, res);
            blit(&r.image, NUM_BACKGROUNDS + 2 * m, f);
            blit(&r.control, NUM_BACKGROUNDS + 2 * m + 1, f);
        }
    }
    sheet.save(&out)?;
    println!("wrote {out}");
    Ok(())
}
