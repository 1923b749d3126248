use super::{BackboneConfig, Param, ParamGroup, PassOptions, Registrar, Stage, Trunk};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::rng::RngStream;
use crate::tensor::{softmax_rows, Graph, Tensor, Var};

/// Plain classifier: conv trunk, global average pooling and a dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub trunk: Trunk,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

pub struct BaselinePass {
    pub graph: Graph,
    pub logits: Var,
    pub params: Vec<(String, Var)>,
}

impl BaselineModel {
    pub fn new(config: BackboneConfig, classes: usize, rng: &mut RngStream) -> Result<Self> {
        let trunk = Trunk::new(config, false, rng)?;
        let d = trunk.config.out_channels();
        let std = (1.0 / d as f64).sqrt();
        Ok(BaselineModel {
            trunk,
            head_weight: Tensor::from_fn(&[d, classes], |_| std * rng.normal()),
            head_bias: Tensor::zeros(&[classes]),
        })
    }

    pub fn trainable_scalars(&self) -> usize {
        self.trunk.params.iter().map(|p| p.value.numel()).sum::<usize>()
            + self.head_weight.numel()
            + self.head_bias.numel()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "head.weight" => Some(&mut self.head_weight),
            "head.bias" => Some(&mut self.head_bias),
            _ => self
                .trunk
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .map(|p| &mut p.value),
        }
    }

    pub fn forward(&self, images: &Tensor, train: bool, opts: &mut PassOptions<'_>) -> Result<BaselinePass> {
        self.trunk.check_input(images)?;
        let stage = train.then_some(Stage::Joint);
        let trainable = move |grp: ParamGroup| stage.is_some_and(|s| s.trains(grp));
        let mut reg = Registrar::new(&trainable);
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let feats = self.trunk.forward_blocks(&mut g, x, &mut reg, opts)?;
        let pooled = g.global_avg_pool(feats)?;
        let w = reg.add(
            &mut g,
            &Param {
                name: "head.weight".into(),
                group: ParamGroup::Head,
                value: self.head_weight.clone(),
            },
        );
        let b = reg.add(
            &mut g,
            &Param {
                name: "head.bias".into(),
                group: ParamGroup::Head,
                value: self.head_bias.clone(),
            },
        );
        let logits = g.dense(pooled, w, Some(b))?;
        Ok(BaselinePass {
            graph: g,
            logits,
            params: reg.vars,
        })
    }

    pub fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        let pass = self.forward(images, false, &mut PassOptions::eval())?;
        Ok(softmax_rows(pass.graph.value(pass.logits)))
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.trunk.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            params: self.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            ..Default::default()
        }
    }

    pub fn params_hash(&self) -> String {
        self.to_checkpoint("").params_hash()
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let src = ck
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let dst = self.param_mut(&name).expect("listed parameter");
            if dst.shape() != src.shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    left: dst.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Copies `backbone.*` tensors from a checkpoint; returns how many.
    pub fn import_backbone(&mut self, ck: &Checkpoint) -> Result<usize> {
        let mut n = 0;
        for p in self.trunk.params.iter_mut() {
            if let Some(src) = ck.params.get(&p.name) {
                if src.shape() != p.value.shape() {
                    return Err(Error::Shape {
                        op: "import_backbone",
                        left: p.value.shape().to_vec(),
                        right: src.shape().to_vec(),
                    });
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}
