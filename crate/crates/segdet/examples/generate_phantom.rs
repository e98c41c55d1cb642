//! Generate one synthetic phantom and write its volume, labels and a
//! noise-free twin as SVOL files under ./phantom_out/.
//!
//!     cargo run --example generate_phantom

use segdet::phantom::{gen_phantom, PhantomParams};
use segdet::volume::write_svol;

fn main() {
    let dims = (32, 48, 32);
    let params = PhantomParams::default();
    let phantom = gen_phantom(7, dims, &params).unwrap();

    let fg = phantom.labels.foreground_count();
    println!(
        "phantom seed 7: {} foreground voxels ({:.2}% of {})",
        fg,
        100.0 * fg as f64 / phantom.labels.numel() as f64,
        phantom.labels.numel()
    );
    let object_slices = phantom.gt_boxes.iter().flatten().count();
    println!("object-bearing slices: {object_slices}/{}", dims.0);
    for (z, b) in phantom.gt_boxes.iter().enumerate() {
        if let Some(b) = b {
            println!("  slice {z:2}: tight box ({:.0},{:.0})-({:.0},{:.0})", b.x1, b.y1, b.x2, b.y2);
        }
    }

    let clean = gen_phantom(7, dims, &PhantomParams { speckle_scale: 0.0, ..params }).unwrap();

    std::fs::create_dir_all("phantom_out").unwrap();
    write_svol("phantom_out/volume.svol".as_ref(), &phantom.volume).unwrap();
    write_svol("phantom_out/labels.svol".as_ref(), &phantom.labels).unwrap();
    write_svol("phantom_out/volume_noise_free.svol".as_ref(), &clean.volume).unwrap();
    println!("wrote phantom_out/volume.svol, labels.svol, volume_noise_free.svol");
}
