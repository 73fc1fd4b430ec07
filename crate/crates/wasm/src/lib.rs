//! wasm-bindgen surface for the static demo page: attack a generated image,
//! re-threshold its uncertainty map, and explore the entropy trace bound.

use wasm_bindgen::prelude::*;

use uvtok_core::attack::{attack_and_mask, AttackConfig};
use uvtok_core::encoder::{encode, init_params, EncoderConfig, EncoderParams};
use uvtok_core::mask::{binarize_mask, MaskConfig, UncertaintyMap};
use uvtok_core::synth::synthetic_image;
use uvtok_core::theory::entropy_bound;
use uvtok_core::Tensor;

fn js(err: uvtok_core::Error) -> JsError {
    JsError::new(&err.to_string())
}

/// Toy encoder plus one generated image and, after an attack, its map.
#[wasm_bindgen]
pub struct Demo {
    config: EncoderConfig,
    params: EncoderParams,
    image: Tensor,
    map: Option<UncertaintyMap>,
}

/// Result of one attack, laid out for canvas drawing.
#[wasm_bindgen]
pub struct AttackView {
    uncertainty: Vec<f64>,
    mask: Vec<u8>,
    objective: Vec<f64>,
    fraction_uncertain: f64,
}

#[wasm_bindgen]
impl AttackView {
    /// Patch-token values of `U` in row-major grid order.
    #[wasm_bindgen(getter)]
    pub fn uncertainty(&self) -> Vec<f64> {
        self.uncertainty.clone()
    }

    /// Patch-token mask (0 = uncertain).
    #[wasm_bindgen(getter)]
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    /// Objective after each iterate, starting with the clean image.
    #[wasm_bindgen(getter)]
    pub fn objective(&self) -> Vec<f64> {
        self.objective.clone()
    }

    #[wasm_bindgen(getter, js_name = fractionUncertain)]
    pub fn fraction_uncertain(&self) -> f64 {
        self.fraction_uncertain
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(model_seed: u64, image_seed: u64) -> Result<Demo, JsError> {
        let config = EncoderConfig::default();
        let params = init_params(&config, model_seed).map_err(js)?;
        let image = synthetic_image(&config, image_seed).map_err(js)?;
        Ok(Demo { config, params, image, map: None })
    }

    /// Patches per side.
    #[wasm_bindgen(getter)]
    pub fn grid(&self) -> usize {
        self.config.grid()
    }

    #[wasm_bindgen(getter, js_name = imageSize)]
    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    /// The image as RGBA bytes for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        let c = self.config.channels;
        self.image
            .data()
            .chunks(c)
            .flat_map(|px| {
                let g = |i: usize| px[i.min(c - 1)].round().clamp(0.0, 255.0) as u8;
                [g(0), g(1), g(2), 255]
            })
            .collect()
    }

    /// PGD with budget `k` and step 1, then the uncertainty map and mask.
    pub fn attack(&mut self, k: u32, iterations: usize, sigma_th: f64) -> Result<AttackView, JsError> {
        let atk = AttackConfig { budget: k, step: 1, iterations, init_noise_seed: None, rng_seed: 0 };
        let mask_cfg = MaskConfig { sigma_th, ..MaskConfig::for_depth(self.config.num_layers) };
        let clean = encode(&self.image, &self.params, &self.config).map_err(js)?;
        let am = attack_and_mask(&self.image, &clean, &self.params, &self.config, &atk, &mask_cfg).map_err(js)?;
        let off = self.config.patch_offset();
        let view = AttackView {
            uncertainty: am.map.patch_values().to_vec(),
            mask: am.mask.values()[off..].to_vec(),
            objective: am.attack.objective_trace.clone(),
            fraction_uncertain: am.mask.fraction_uncertain,
        };
        self.map = Some(am.map);
        Ok(view)
    }

    /// Re-binarizes the last attack's map at a new threshold.
    pub fn rethreshold(&self, sigma_th: f64) -> Result<Vec<u8>, JsError> {
        let map = self.map.as_ref().ok_or_else(|| JsError::new("run an attack first"))?;
        let mask = binarize_mask(map, sigma_th).map_err(js)?;
        Ok(mask.values()[self.config.patch_offset()..].to_vec())
    }
}

/// `[gaussian_entropy, trace_bound, gap]` for a covariance spectrum.
#[wasm_bindgen(js_name = traceBound)]
pub fn trace_bound(eigenvalues: Vec<f64>) -> Result<Vec<f64>, JsError> {
    let b = entropy_bound(&eigenvalues).map_err(js)?;
    Ok(vec![b.gaussian_entropy, b.trace_bound, b.gap])
}
