TOOL_VERSION = '0.3.0'

# 麦克风对 (1-based), 用于 15 麦克风阵列的 IPD/AF 特征
DEFAULT_PAIRS_ONE_BASED = ((1, 15), (2, 14), (3, 13), (1, 7), (12, 4), (11, 5), (12, 8), (7, 10), (8, 9))
DEFAULT_NUM_MICS = 15
DEFAULT_MIC_SPACING_M = 0.04

# 数值阈值
MAGNITUDE_FLOOR = 1e-12
MASK_ENERGY_FLOOR = 1e-20
TRACE_FLOOR = 1e-12
METRIC_EPSILON = 1e-8
METRIC_CLAMP_DB = 80.0

SEPARATION_METHODS = ('delay-sum', 'tf-mask', 'filter-sum', 'mvdr')
ORACLE_MASK_TYPES = ('irm', 'cm')

# 场景目录中的文件名
MIXTURE_WAV = 'mixture.wav'
TARGET_WAV = 'target.wav'
INTERFERER_WAV = 'interferer.wav'
NOISE_WAV = 'noise.wav'
META_FILE = 'meta.json'
GEOMETRY_FILE = 'geometry.json'
MANIFEST_FILE = 'manifest.json'

# 命令行退出码
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
