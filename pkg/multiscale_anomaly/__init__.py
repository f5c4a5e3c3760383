from multiscale_anomaly.adversarial import *
from multiscale_anomaly.config import *
from multiscale_anomaly.dataset import *
from multiscale_anomaly.evaluation import *
from multiscale_anomaly.experiment import *
from multiscale_anomaly.model import *
from multiscale_anomaly.representation import *
from multiscale_anomaly.scoring import *
from multiscale_anomaly.tensor import *
from multiscale_anomaly.trainer import *
from multiscale_anomaly.utils import *
