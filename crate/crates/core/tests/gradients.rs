mod common;

use common::gradcheck;

#[test]
fn linear_layer_parameters_and_input() {
    gradcheck::linear_layer_parameters_and_input();
}

#[test]
fn vqa_network_parameters_and_visual_input() {
    gradcheck::vqa_network_parameters_and_visual_input();
}

#[test]
fn generator_parameters() {
    gradcheck::generator_parameters();
}

#[test]
fn bias_model_through_generator() {
    gradcheck::bias_model_through_generator();
}

#[test]
fn discriminator_parameters_and_input() {
    gradcheck::discriminator_parameters_and_input();
}

#[test]
fn bce_gradient() {
    gradcheck::bce_gradient();
}

#[test]
fn distillation_gradients() {
    gradcheck::distillation_gradients();
}

#[test]
fn gan_loss_gradients() {
    gradcheck::gan_loss_gradients();
}

#[test]
fn target_loss_gradients() {
    gradcheck::target_loss_gradients();
}

#[test]
fn discriminator_objective_end_to_end() {
    gradcheck::discriminator_objective_end_to_end();
}
