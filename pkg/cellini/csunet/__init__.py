__all__ = [
    'Tensor',
    'Parameter',
    'backward',
    'no_grad',
    'Module',
    'blocks',
    'CSUNet3D',
    'build',
    'summary',
    'parameter_count',
    'NetworkConfig',
    'TrainConfig',
    'LossConfig',
    'RunConfig',
    'combined_loss',
    'metrics',
    'fit',
    'evaluate',
    'cross_validate',
    'grad_check',
    'run_battery',
    'precision',
]
from cellini.csunet.tensor    import Tensor, Parameter, backward, no_grad
from cellini.csunet.base      import Module, blocks
from cellini.csunet.model     import CSUNet3D, build, summary, parameter_count
from cellini.csunet.types     import NetworkConfig, TrainConfig, LossConfig, RunConfig
from cellini.csunet.losses    import combined_loss, metrics
from cellini.csunet.training  import fit, evaluate, cross_validate
from cellini.csunet.gradcheck import grad_check, run_battery
from cellini.csunet.utils     import precision
