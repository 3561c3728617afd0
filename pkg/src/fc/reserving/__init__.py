# make package
