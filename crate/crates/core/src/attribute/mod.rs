//! Attribute models `p(a | x)`: a topic bag of words and a linear
//! discriminator over mean hidden states.

pub mod bow;
pub mod discrim;

pub use bow::{bow_log_likelihood, bow_log_likelihood_var, load_bow, parse_word_list, BagOfWords};
pub use discrim::{
    discrim_log_prob, discrim_log_prob_var, discrim_step_loss, mean_representation, read_labelled_tsv,
    train_discriminator, train_discriminator_on_rows, DiscrimContext, DiscrimTrainOptions, DiscrimTrainReport,
    LinearDiscriminator,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub enum AttributeModel<S> {
    Bow(BagOfWords),
    Discriminator(LinearDiscriminator<S>),
}

/// Direction of the attribute objective: `Minus` steers away from the
/// attribute (e.g. away from a toxicity class).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveSign {
    #[default]
    #[serde(rename = "+1")]
    Plus,
    #[serde(rename = "-1")]
    Minus,
}

impl ObjectiveSign {
    pub fn value(self) -> f64 {
        match self {
            ObjectiveSign::Plus => 1.0,
            ObjectiveSign::Minus => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTarget<S> {
    pub model: AttributeModel<S>,
    /// Target class; always 0 for bags of words.
    pub class_index: usize,
    pub objective_sign: ObjectiveSign,
}

impl<S: Scalar> AttributeTarget<S> {
    pub fn bow(bag: BagOfWords, objective_sign: ObjectiveSign) -> Self {
        Self { model: AttributeModel::Bow(bag), class_index: 0, objective_sign }
    }

    pub fn discriminator(d: LinearDiscriminator<S>, class_index: usize, objective_sign: ObjectiveSign) -> Result<Self> {
        if class_index >= d.num_classes() {
            return Err(Error::InvalidField {
                field: "class",
                reason: format!("class index {class_index} but the discriminator has {} classes", d.num_classes()),
            });
        }
        Ok(Self { model: AttributeModel::Discriminator(d), class_index, objective_sign })
    }

    pub fn sign(&self) -> S {
        S::lit(self.objective_sign.value())
    }

    pub fn is_bow(&self) -> bool {
        matches!(self.model, AttributeModel::Bow(_))
    }

    /// Short label for reports: the bag name, or the class name.
    pub fn label(&self) -> String {
        let base = match &self.model {
            AttributeModel::Bow(b) => b.name.clone(),
            AttributeModel::Discriminator(d) => d.class_names[self.class_index].clone(),
        };
        match self.objective_sign {
            ObjectiveSign::Plus => base,
            ObjectiveSign::Minus => format!("-{base}"),
        }
    }

    pub fn cast<T: Scalar>(&self) -> AttributeTarget<T> {
        let model = match &self.model {
            AttributeModel::Bow(b) => AttributeModel::Bow(b.clone()),
            AttributeModel::Discriminator(d) => AttributeModel::Discriminator(d.cast()),
        };
        AttributeTarget { model, class_index: self.class_index, objective_sign: self.objective_sign }
    }
}
