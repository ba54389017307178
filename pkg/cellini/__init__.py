from cellini.csunet import *