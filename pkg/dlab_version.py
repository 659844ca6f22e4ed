# VERSION should be PEP440 compatible
VERSION = '0.1.0'

# Indicates if this version is a release version
RELEASE = 'dev' not in VERSION
