//! Tour of the geometric group: composition, inversion, relative transforms,
//! and the matching pixel-space and token-space actions.
//!
//!     cargo run -p softequiv --example group_actions

use softequiv::group::{
    act_image, act_tokens, compose, inverse, relative, GroupElement, Ratio, TokenGrid,
};
use softequiv::model::patch_means;
use softequiv::tensor::io::RawTensor;
use softequiv::tensor::Tape;

fn main() {
    // elements are stored canonically as diag(sx, sy) * rot^k * flip^f
    let rot90 = GroupElement::dihedral(1, false);
    let hflip = GroupElement::dihedral(0, true);
    let stretch = GroupElement::scaling(Ratio::new(5, 4), Ratio::new(3, 4));

    println!("rot90           = {}", rot90.to_log_string());
    println!("hflip           = {}", hflip.to_log_string());
    println!("stretch         = {}", stretch.to_log_string());
    println!("rot90 . hflip   = {}", compose(rot90, hflip).to_log_string());
    println!("rot90 . stretch = {}", compose(rot90, stretch).to_log_string());
    println!("inverse(rot90)  = {}", inverse(rot90).to_log_string());
    println!(
        "relative(rot90, rot180) = {}",
        relative(rot90, GroupElement::dihedral(2, false)).to_log_string()
    );

    // pixel action on a tiny image: [[a,b],[c,d]] -> [[b,d],[a,c]] under a
    // counter-clockwise quarter turn
    let img = RawTensor::new(vec![2, 2, 1], vec![1.0f64, 2.0, 3.0, 4.0]);
    let turned = act_image(rot90, &img).unwrap();
    println!("\nrot90 on [[1,2],[3,4]] -> {:?}", turned.data);

    // the matching token action: patchify a per-patch-constant image, act on
    // tokens, compare with acting on pixels first
    let patch = 4;
    let side = 3 * patch;
    let mut data = vec![0.0f64; side * side];
    for ty in 0..3 {
        for tx in 0..3 {
            for py in 0..patch {
                for px in 0..patch {
                    data[(ty * patch + py) * side + tx * patch + px] = (ty * 3 + tx) as f64;
                }
            }
        }
    }
    let img = RawTensor::new(vec![side, side, 1], data);
    let (tokens, grid) = patch_means(&img, patch).unwrap();
    let tape: Tape<f64> = Tape::new();
    let feat = tape.leaf(tokens.data.clone(), &tokens.shape).unwrap();
    let moved_tokens = act_tokens(rot90, feat, grid, TokenGrid::new(3, 3, patch)).unwrap();
    let (expect, _) = patch_means(&act_image(rot90, &img).unwrap(), patch).unwrap();
    println!(
        "token action equals pixel action then patchify: {}",
        moved_tokens.value() == expect.data
    );
}
