//! Named variants of the objective ablation. Each is a delta applied to the
//! configured training setup, which otherwise stays untouched.

use unimlip::trainer::TrainConfig;

pub const VARIANTS: [&str; 7] = [
    "baseline",
    "plus_itc_pert_text",
    "plus_itc_pert_image",
    "plus_i2i_frozen",
    "naive_i2i_unfrozen",
    "three_view_unfrozen",
    "full",
];

/// Row label in comparison tables.
pub fn label(variant: &str) -> &'static str {
    match variant {
        "baseline" => "ITC + MLM",
        "plus_itc_pert_text" => "+ perturbed-text ITC",
        "plus_itc_pert_image" => "+ perturbed-image ITC",
        "plus_i2i_frozen" => "+ I2I, frozen BN",
        "naive_i2i_unfrozen" => "+ I2I, unfrozen BN",
        "three_view_unfrozen" => "3-view forward, no I2I loss, unfrozen BN",
        "full" => "all objectives, frozen BN",
        _ => "unknown",
    }
}

/// `base` with the variant's delta applied, or `None` for an unknown name.
pub fn apply(variant: &str, base: &TrainConfig) -> Option<TrainConfig> {
    let mut c = base.clone();
    let o = &mut c.objectives;
    // Everything except "full" starts from ITC + MLM.
    if variant != "full" {
        o.itc_pert_image = false;
        o.itc_pert_text = false;
        o.i2i = false;
    }
    o.mlm = true;
    match variant {
        "baseline" => {}
        "plus_itc_pert_text" => o.itc_pert_text = true,
        "plus_itc_pert_image" => o.itc_pert_image = true,
        "plus_i2i_frozen" => {
            o.i2i = true;
            c.freeze_bn_in_phase2 = true;
        }
        "naive_i2i_unfrozen" => {
            o.i2i = true;
            c.freeze_bn_in_phase2 = false;
        }
        "three_view_unfrozen" => {
            o.i2i = true;
            c.freeze_bn_in_phase2 = false;
            c.weights.lambda_um = 0.0;
        }
        "full" => {
            o.itc_pert_image = true;
            o.itc_pert_text = true;
            o.i2i = true;
            c.freeze_bn_in_phase2 = true;
        }
        _ => return None,
    }
    Some(c)
}
