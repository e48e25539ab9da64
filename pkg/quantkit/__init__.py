from .environment import Environment
from .configuration import Configuration, ConfigurationError
from .exceptions import *

from .tensor import Tensor, Parameter, no_grad
from .quantizer import *
from .graph import *
from .range_setting import *
from .transforms import *
from .adaround import *
from .qat import *
from .int_executor import *
from .metrics import *
from .serialization import *

from .pipelines import Pipeline, PipelineReport
from .pipelines.ptq import PTQ, PTQReport
from .pipelines.qat import QAT, QATReport
from .pipelines.diagnose import Diagnose, DiagnosticReport
from .pipelines.evaluate import Evaluate, EvaluationReport
