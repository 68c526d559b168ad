use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Tensor, TensorError};

/// Mean over tokens of `‖h_teacher − h_student‖₂ / √d_model`.
pub fn alignment_loss(g: &mut Graph, h_teacher: Var, h_student: Var, d_model: usize) -> Result<Var> {
    if g.shape(h_teacher) != g.shape(h_student) {
        return Err(TensorError::ShapeMismatch {
            op: "alignment_loss",
            lhs: g.shape(h_teacher).to_vec(),
            rhs: g.shape(h_student).to_vec(),
        }
        .into());
    }
    let diff = g.sub(h_teacher, h_student)?;
    let norms = g.row_norms(diff)?;
    let mean = g.mean(norms)?;
    Ok(g.scale(mean, 1.0 / (d_model as f64).sqrt())?)
}

/// Value-only form of [`alignment_loss`].
pub fn alignment_loss_value(h_teacher: &Tensor, h_student: &Tensor, d_model: usize) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(h_teacher.clone());
    let b = g.constant(h_student.clone());
    let l = alignment_loss(&mut g, a, b, d_model)?;
    Ok(g.value(l).item())
}

/// Mean over positions of `KL(softmax(teacher) ‖ softmax(student))`.
pub fn kd_loss_wordlevel(g: &mut Graph, teacher_logits: &Tensor, student_logits: Var) -> Result<Var> {
    Ok(g.kl_div_rows(teacher_logits, student_logits)?)
}

/// Value-only form of [`kd_loss_wordlevel`].
pub fn kd_loss_value(teacher_logits: &Tensor, student_logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone());
    let l = kd_loss_wordlevel(&mut g, teacher_logits, s)?;
    Ok(g.value(l).item())
}
