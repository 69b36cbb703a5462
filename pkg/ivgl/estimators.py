# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

from ivgl.invalid_iv import IVGLSEstimator
from ivgl.two_stage import Estimator, GLEstimator, IVGLEstimator, IVLEstimator

# Register the default classes with the names used by the CLI and the simulations
GLEstimator.register("gl")
IVLEstimator.register("ivl")
IVGLEstimator.register("ivgl")
IVGLSEstimator.register("ivgls")


def get_estimator(name):
    return Estimator.get(name)
