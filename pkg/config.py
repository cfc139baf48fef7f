COMPOSITE_SIZE = 128
NODE_PATCH_SIZE = 32
GRID_CELLS = COMPOSITE_SIZE // NODE_PATCH_SIZE
MAX_NODES = GRID_CELLS * GRID_CELLS
FEATURE_MAP_SIZE = 8

LOG_EPS = 1e-12

RADIOMICS_FIELDS = ("f_size", "f_SD", "f_RD", "f_ADC")
NUM_CLASSES = 2
METASTATIC_CHANNEL = 1

CHECKPOINT_MAGIC = b"WEGA1"
DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"
PATCH_SUFFIX = ".f32"

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DEFAULT_LOG_LEVEL = "INFO"
